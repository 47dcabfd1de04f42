use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionState {
    Idle,
    Signaling,
    Checking,
    Connected,
    Failed,
    Closed,
}

impl SessionState {
    pub const ALL: [SessionState; 6] = [
        SessionState::Idle,
        SessionState::Signaling,
        SessionState::Checking,
        SessionState::Connected,
        SessionState::Failed,
        SessionState::Closed,
    ];

    /// The transition table.
    ///
    /// Beyond the main path IDLE→SIGNALING→CHECKING→{CONNECTED|FAILED}→CLOSED:
    /// a handshake can time out or be refused while SIGNALING, a connected
    /// channel can break, and a user may close a session before it connects.
    pub fn can_move_to(self, next: SessionState) -> bool {
        use SessionState::*;
        matches!(
            (self, next),
            (Idle, Signaling)
                | (Signaling, Checking)
                | (Signaling, Failed)
                | (Checking, Connected)
                | (Checking, Failed)
                | (Connected, Failed)
                | (Connected, Closed)
                | (Failed, Closed)
                | (Idle, Closed)
                | (Signaling, Closed)
                | (Checking, Closed)
        )
    }

    pub fn is_terminal(self) -> bool {
        self == SessionState::Closed
    }
}

impl std::fmt::Display for SessionState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SessionState::Idle => "IDLE",
            SessionState::Signaling => "SIGNALING",
            SessionState::Checking => "CHECKING",
            SessionState::Connected => "CONNECTED",
            SessionState::Failed => "FAILED",
            SessionState::Closed => "CLOSED",
        };
        f.write_str(s)
    }
}
