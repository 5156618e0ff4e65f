//! JSON config files merged under command-line flags.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::Failure;

/// Reads a config file. Unknown keys are a usage error; a missing file is
/// a data error.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text =
        fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("--config {}: {e}", path.display())))
}

/// Applies flags that were given on top of file or default values.
pub struct Overrides;

impl Overrides {
    pub fn new() -> Self {
        Overrides
    }

    pub fn set<T>(self, field: &mut T, flag: Option<T>) -> Self {
        if let Some(v) = flag {
            *field = v;
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file_values() {
        let mut epochs = 3;
        let mut seed = 9;
        Overrides::new()
            .set(&mut epochs, Some(7))
            .set(&mut seed, None);
        assert_eq!((epochs, seed), (7, 9));
    }
}
