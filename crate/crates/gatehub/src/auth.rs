//! Roles, credentials and the permission matrix.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Admin,
    PowerUser,
    EndUser,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Admin, Role::PowerUser, Role::EndUser];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Admin => "admin",
            Role::PowerUser => "power_user",
            Role::EndUser => "end_user",
        }
    }
}

/// Everything a caller can ask the service to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    ManageUsers,
    ListTemplates,
    ReadTemplate,
    CreateTemplate,
    PublishTemplate,
    CloneTemplate,
    ReadCatalog,
    CreateRun,
    ReadRun,
    CancelRun,
    ReadSites,
    DownloadArtifact,
}

impl Action {
    pub const ALL: [Action; 12] = [
        Action::ManageUsers,
        Action::ListTemplates,
        Action::ReadTemplate,
        Action::CreateTemplate,
        Action::PublishTemplate,
        Action::CloneTemplate,
        Action::ReadCatalog,
        Action::CreateRun,
        Action::ReadRun,
        Action::CancelRun,
        Action::ReadSites,
        Action::DownloadArtifact,
    ];
}

/// Allowed roles per action: admin, power user, end user.
pub const MATRIX: [(Action, [bool; 3]); 12] = [
    (Action::ManageUsers, [true, false, false]),
    (Action::ListTemplates, [true, true, true]),
    (Action::ReadTemplate, [true, true, true]),
    (Action::CreateTemplate, [true, true, false]),
    (Action::PublishTemplate, [true, true, false]),
    (Action::CloneTemplate, [true, true, true]),
    (Action::ReadCatalog, [true, true, true]),
    (Action::CreateRun, [true, true, true]),
    (Action::ReadRun, [true, true, true]),
    (Action::CancelRun, [true, true, true]),
    (Action::ReadSites, [true, true, true]),
    (Action::DownloadArtifact, [true, true, true]),
];

pub fn allowed(role: Role, action: Action) -> bool {
    let column = match role {
        Role::Admin => 0,
        Role::PowerUser => 1,
        Role::EndUser => 2,
    };
    MATRIX.iter().find(|(a, _)| *a == action).is_some_and(|(_, row)| row[column])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub username: String,
    pub role: Role,
    pub salt: String,
    pub password_hash: String,
}

const ROUNDS: u32 = 100_000;

pub fn hash_password(password: &str, salt: &str) -> String {
    let key = pbkdf2::pbkdf2_hmac_array::<Sha256, 32>(password.as_bytes(), salt.as_bytes(), ROUNDS);
    hex::encode(key)
}

pub fn random_hex(bytes: usize) -> String {
    let mut buf = vec![0u8; bytes];
    rand::rng().fill_bytes(&mut buf);
    hex::encode(buf)
}

/// Tokens are stored only as their digest.
pub fn token_digest(token: &str) -> String {
    hex::encode(Sha256::digest(token.as_bytes()))
}

impl User {
    pub fn new(username: &str, role: Role, password: &str) -> Self {
        let salt = random_hex(16);
        User { username: username.into(), role, password_hash: hash_password(password, &salt), salt }
    }

    pub fn set_password(&mut self, password: &str) {
        self.salt = random_hex(16);
        self.password_hash = hash_password(password, &self.salt);
    }

    pub fn verify(&self, password: &str) -> bool {
        hash_password(password, &self.salt) == self.password_hash
    }
}

pub fn valid_username(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 64
        && name.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn read_actions_nest() {
        for action in Action::ALL {
            let [admin, power, end] = MATRIX.iter().find(|(a, _)| *a == action).unwrap().1;
            assert!(admin >= power && power >= end, "{action:?}");
        }
        assert!(!allowed(Role::PowerUser, Action::ManageUsers));
        assert!(!allowed(Role::EndUser, Action::PublishTemplate));
        assert!(allowed(Role::EndUser, Action::CreateRun));
    }

    #[test]
    fn passwords() {
        let u = User::new("ann", Role::EndUser, "secret");
        assert!(u.verify("secret"));
        assert!(!u.verify("Secret"));
        assert_ne!(User::new("ann", Role::EndUser, "secret").password_hash, u.password_hash);
    }

    #[test]
    fn usernames() {
        assert!(valid_username("ann.lee-2"));
        assert!(!valid_username("ann lee"));
        assert!(!valid_username(""));
    }
}
