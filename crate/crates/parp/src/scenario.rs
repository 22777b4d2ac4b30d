//! TOML scenario files and the bundled scenario set.

use std::fs;
use std::path::Path;

use parp_core::simnet::{Scenario, SimError};

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Invalid(#[from] SimError),
}

/// Command-line overrides applied on top of a parsed scenario.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub block_interval: Option<u64>,
    pub dispute_window: Option<u64>,
    pub horizon: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, s: &mut Scenario) {
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        if let Some(b) = self.block_interval {
            s.block_interval = b;
        }
        if let Some(w) = self.dispute_window {
            s.chain.dispute_window = w;
        }
        if let Some(h) = self.horizon {
            s.horizon = h;
        }
    }
}

/// Parses and validates a scenario document.
pub fn parse(text: &str) -> Result<Scenario, LoadError> {
    let s: Scenario = toml::from_str(text)?;
    s.validate()?;
    Ok(s)
}

pub fn load(path: &Path) -> Result<Scenario, LoadError> {
    let text = fs::read_to_string(path).map_err(|source| LoadError::Io { path: path.display().to_string(), source })?;
    parse(&text)
}

/// Resolves `arg` as a file path, falling back to a bundled scenario name.
pub fn resolve(arg: &str) -> Result<Scenario, LoadError> {
    let path = Path::new(arg);
    if !path.exists() {
        if let Some((_, text)) = BUNDLED.iter().find(|(name, _)| *name == arg) {
            return parse(text);
        }
    }
    load(path)
}

/// The bundled suite, in execution order.
pub const BUNDLED: &[(&str, &str)] = &[
    ("honest", include_str!("../scenarios/honest.scenario")),
    ("honest_zero_calls", include_str!("../scenarios/honest_zero_calls.scenario")),
    ("write", include_str!("../scenarios/write.scenario")),
    ("fraud_payment", include_str!("../scenarios/fraud_payment.scenario")),
    ("fraud_stale_height", include_str!("../scenarios/fraud_stale_height.scenario")),
    ("fraud_bad_proof", include_str!("../scenarios/fraud_bad_proof.scenario")),
    ("invalid_sig", include_str!("../scenarios/invalid_sig.scenario")),
    ("invalid_hreq", include_str!("../scenarios/invalid_hreq.scenario")),
    ("invalid_channel_id", include_str!("../scenarios/invalid_channel_id.scenario")),
    ("dispute", include_str!("../scenarios/dispute.scenario")),
    ("silent_close", include_str!("../scenarios/silent_close.scenario")),
    ("unresponsive", include_str!("../scenarios/unresponsive.scenario")),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_parse() {
        for (name, text) in BUNDLED {
            let s = parse(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(&s.name, name);
            assert!(!s.expect.is_empty(), "{name} asserts nothing");
        }
    }

    #[test]
    fn overrides_replace_fields() {
        let mut s = parse(BUNDLED[0].1).unwrap();
        Overrides { seed: Some(9), block_interval: Some(4), dispute_window: Some(2), horizon: Some(77) }.apply(&mut s);
        assert_eq!((s.seed, s.block_interval, s.chain.dispute_window, s.horizon), (9, 4, 2, 77));
    }

    #[test]
    fn errors_are_classified() {
        assert!(matches!(parse("horizon = \"x\""), Err(LoadError::Parse(_))));
        assert!(matches!(parse("block_interval = 0"), Err(LoadError::Invalid(_))));
        assert!(matches!(load(Path::new("/nonexistent/x.scenario")), Err(LoadError::Io { .. })));
    }
}
