//! Run configuration: which keys each subcommand accepts, their defaults,
//! and the merge `defaults < --config file < flags`.
//!
//! A config file holds one `key=value` per line. Blank lines and lines
//! starting with `#` are ignored; keys may use `-` or `_`.

use std::path::{Path, PathBuf};

use hlstcm_core::{GradCheckOptions, HlstcmConfig, SynthConfig, TrainConfig};

use crate::CliError;

const HELP: &[(&str, &str)] = &[
    ("p", "person slots"),
    ("seq_len", "steps per clip"),
    ("d_x", "feature size per person and step"),
    ("k", "number of classes"),
    ("noise_sigma", "standard deviation of the feature noise"),
    ("seed", "random seed"),
    ("n_train", "training clips, a multiple of k"),
    ("n_test", "test clips, a multiple of k"),
    ("variant", "hlstcm, two-group[:AB..], b1, b2, b3 or b4"),
    ("d_sp", "person-LSTM hidden size"),
    ("d_proj", "projection size between the layers, 0 to skip it"),
    ("d_co", "concurrent-LSTM hidden size"),
    ("d_top", "top LSTM size of the two-group variant"),
    ("share_sp_params", "one person LSTM shared by every slot"),
    ("linear_logits", "use W h + b as logits instead of tanh(W h + b)"),
    ("cumulative_loss", "sum the loss over every step instead of the last one"),
    ("lr", "initial learning rate"),
    ("momentum", "momentum coefficient in [0, 1)"),
    ("decay", "per-epoch learning-rate factor in (0, 1]"),
    ("epochs", "total epochs, counting those of a resumed checkpoint"),
    ("clip_norm", "global gradient-norm ceiling, 0 disables clipping"),
    ("shuffle", "reshuffle the training set every epoch"),
    ("batch_size", "samples per parameter update"),
    ("eval_every", "test-set evaluation interval in epochs"),
    ("epsilon", "finite-difference step"),
    ("threshold", "pass threshold on the largest relative error"),
    ("max_full", "tensors with more entries than this are subsampled"),
    ("subsample", "entries checked in a subsampled tensor"),
    ("extended_precision", "difference the objective in double-double arithmetic"),
    ("out_dir", "output directory"),
    ("train", "training tracklet file"),
    ("test", "test tracklet file"),
    ("resume", "checkpoint to continue training from"),
    ("checkpoint", "model checkpoint"),
    ("data", "tracklet file to evaluate"),
];

/// Model keys a training run takes from its dataset instead.
pub const DATA_DIMS: [&str; 4] = ["p", "d_x", "k", "seq_len"];

pub fn help(key: &str) -> &'static str {
    HELP.iter().find(|(k, _)| *k == key).map(|(_, h)| *h).unwrap_or("")
}

/// The desk-scale model the gradient check builds by default.
pub fn gradcheck_model() -> HlstcmConfig {
    HlstcmConfig { p: 3, d_x: 3, d_sp: 4, d_proj: 3, d_co: 4, d_top: 4, k: 3, seq_len: 4, ..HlstcmConfig::default() }
}

pub const GRADCHECK_SEED: u64 = 7;

/// Alternative spellings accepted for a few keys.
pub const ALIASES: &[(&str, &str)] = &[("classes", "k"), ("T", "seq_len")];

fn canonical(key: &str) -> &str {
    ALIASES.iter().find(|(a, _)| *a == key).map(|(_, k)| *k).unwrap_or(key)
}

/// Accepted keys of `command` with their built-in defaults, in display order.
/// An empty default marks a path that has no default.
pub fn defaults(command: &str) -> Vec<(&'static str, String)> {
    let path = |k: &'static str, v: &str| (k, v.to_string());
    match command {
        "gen" => {
            let mut v = SynthConfig::default().to_pairs();
            v.push(path("out_dir", "data"));
            v
        }
        "train" => {
            let mut v: Vec<_> =
                HlstcmConfig::default().to_pairs().into_iter().filter(|(k, _)| !DATA_DIMS.contains(k)).collect();
            v.extend(TrainConfig::default().to_pairs());
            v.extend([path("train", ""), path("test", ""), path("resume", ""), path("out_dir", "run")]);
            v
        }
        "eval" | "predict-curve" => vec![path("checkpoint", ""), path("data", ""), path("out_dir", "")],
        "gradcheck" => {
            let o = GradCheckOptions::default();
            let mut v = gradcheck_model().to_pairs();
            v.extend([
                ("seed", GRADCHECK_SEED.to_string()),
                ("epsilon", o.epsilon.to_string()),
                ("threshold", o.threshold.to_string()),
                ("max_full", o.max_full.to_string()),
                ("subsample", o.subsample.to_string()),
                ("extended_precision", o.extended_precision.to_string()),
                path("out_dir", ""),
            ]);
            v
        }
        other => panic!("no key schema for command '{other}'"),
    }
}

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub values: Vec<(&'static str, String)>,
    pub file: Option<PathBuf>,
}

impl RunConfig {
    /// Starts from the defaults of `command`, then applies the file entries
    /// and finally the flag values. Unknown keys are rejected.
    pub fn resolve(command: &str, file: Option<&Path>, flags: &[(&str, String)]) -> Result<RunConfig, CliError> {
        RunConfig::resolve_over(command, defaults(command), file, flags)
    }

    /// As [`RunConfig::resolve`] with `base` in place of the built-in defaults.
    pub fn resolve_over(
        command: &str,
        base: Vec<(&'static str, String)>,
        file: Option<&Path>,
        flags: &[(&str, String)],
    ) -> Result<RunConfig, CliError> {
        let mut rc = RunConfig { command: command.to_string(), values: base, file: file.map(Path::to_path_buf) };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
            for (line, key, value) in parse_file(&text, path)? {
                if !rc.set(&key, &value) {
                    return Err(CliError::Usage(format!(
                        "{}:{line}: unknown key '{key}' for '{command}' (accepted: {})",
                        path.display(),
                        rc.keys().join(", ")
                    )));
                }
            }
        }
        for (key, value) in flags {
            if !rc.set(key, value) {
                return Err(CliError::Usage(format!("unknown key '{key}' for '{command}'")));
            }
        }
        Ok(rc)
    }

    pub fn set(&mut self, key: &str, value: &str) -> bool {
        let key = canonical(key);
        match self.values.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => {
                slot.1 = value.trim().to_string();
                true
            }
            None => false,
        }
    }

    pub fn keys(&self) -> Vec<&'static str> {
        self.values.iter().map(|(k, _)| *k).collect()
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.iter().find(|(k, _)| *k == key).map(|(_, v)| v.as_str()).unwrap_or("")
    }

    /// The value of a path key, or `None` when it was left empty.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn required_path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.path(key).ok_or_else(|| {
            CliError::Usage(format!("'{}' needs --{} (or {key}= in the config file)", self.command, key.replace('_', "-")))
        })
    }

    /// Feeds every value to `set`, which reports whether it owns the key.
    pub fn apply(&self, mut set: impl FnMut(&str, &str) -> hlstcm_core::Result<bool>) -> hlstcm_core::Result<()> {
        for (k, v) in &self.values {
            set(k, v)?;
        }
        Ok(())
    }

    pub fn push(&mut self, key: &'static str, value: String) {
        if !self.set(key, &value) {
            self.values.push((key, value));
        }
    }
}

/// `(line number, key, value)` for each entry of a config file.
pub fn parse_file(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("{}:{}: expected key=value, got '{line}'", path.display(), i + 1)));
        };
        out.push((i + 1, k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}
