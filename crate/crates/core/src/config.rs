//! Flat `key = value` configuration files.
//!
//! One key per line; `#` starts a comment; blank lines are ignored.
//!
//! Recognized training keys and their defaults:
//!
//! | key          | default | meaning                                   |
//! |--------------|---------|-------------------------------------------|
//! | batch_size   | 64      | windows per optimizer step                |
//! | lr           | 5e-4    | Adam learning rate                        |
//! | max_epochs   | 1000    | epoch cap                                 |
//! | patience     | 20      | epochs without validation improvement     |
//! | bits         | 2       | activation bit width (T = 2^bits − 1)     |
//! | seed         | 0       | initialization and shuffling seed         |
//! | calib_size   | 256     | training windows used to initialize α     |
//! | d_hidden     | 16      | block hidden width                        |
//! | d_state      | 4       | state size per channel                    |
//! | r_delta      | ceil(d_hidden / 8) | Δ bottleneck width             |
//! | conv_k       | 4       | depthwise convolution width               |
//! | n_blocks     | 1       | stacked blocks                            |
//! | eps          | 1e-6    | RMSNorm epsilon                           |
//! | history      | 12      | input window length H                     |
//! | horizon      | 3       | forecast length G                         |
//! | train_ratio  | 0.7     | chronological split ratios                |
//! | val_ratio    | 0.2     |                                           |
//! | test_ratio   | 0.1     |                                           |

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if let Some((first, _)) = entries.insert(k.to_string(), (i + 1, v.to_string())) {
                return Err(Error::Config(format!("line {}: `{k}` already set on line {first}", i + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("line {line}: cannot parse `{key}` value {v:?}"))),
        }
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.get(key)
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.get(key)
    }

    /// Errors on any key not in `allowed`.
    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        for (k, (line, _)) in &self.entries {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Config(format!("line {line}: unknown key `{k}`")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_spacing() {
        let kv = KeyValues::parse("# header\nlr = 1e-3  # inline\n\n bits=3\nname = a b\n").unwrap();
        assert_eq!(kv.get_f64("lr").unwrap(), Some(1e-3));
        assert_eq!(kv.get_usize("bits").unwrap(), Some(3));
        assert_eq!(kv.get_str("name"), Some("a b"));
        assert_eq!(kv.get_f64("missing").unwrap(), None);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(KeyValues::parse("lr 1e-3\n").is_err());
        assert!(KeyValues::parse("lr = 1\nlr = 2\n").is_err());
        assert!(KeyValues::parse(" = 2\n").is_err());
        let kv = KeyValues::parse("bits = two\n").unwrap();
        assert!(kv.get_usize("bits").is_err());
        assert!(kv.reject_unknown(&["lr"]).is_err());
        assert!(kv.reject_unknown(&["bits"]).is_ok());
    }
}
