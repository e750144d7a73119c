//! Run configuration: defaults, then a flat `key = value` file, then
//! command-line overrides. The resolved form is echoed in the same syntax.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::detector::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::prune::PruneConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub count: usize,
    pub data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
    pub prune: PruneConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: None,
            count: 500,
            data: None,
            eval_data: None,
            model: None,
            input: None,
            out: None,
            train: TrainConfig::default(),
            prune: PruneConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("invalid value {value:?} for {key}")))
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn show_path(v: &Option<PathBuf>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

/// Keys echoed for each command, in output order.
fn command_keys(command: &str) -> &'static [&'static str] {
    match command {
        "gen-data" => &["seed", "threads", "count", "out"],
        "train" => &[
            "seed", "threads", "data", "eval_data", "out", "epochs", "batch_size", "lr", "lr_milestones",
            "lr_decay", "momentum", "weight_decay", "grad_clip", "m", "match_threshold", "neg_ratio",
        ],
        "prune" => &[
            "seed", "threads", "model", "data", "eval_data", "out", "eta", "alpha", "m", "gamma",
            "epochs_per_layer", "match_threshold", "finetune_lr", "finetune_batch_size", "finetune_images",
            "scoring_batches", "scoring_batch_size", "loss_scale", "final_finetune_epochs",
        ],
        "eval" => &["seed", "threads", "model", "data", "out", "score_threshold", "nms_iou"],
        "report-gradients" => &["input"],
        _ => &[],
    }
}

impl RunConfig {
    /// Set one key; `seed`, `m` and `match_threshold` apply everywhere.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "seed" => {
                self.seed = parse(key, value)?;
                self.train.seed = self.seed;
                self.prune.seed = self.seed;
            }
            "threads" => self.threads = parse_opt(key, value)?,
            "count" => self.count = parse(key, value)?,
            "data" => self.data = parse_opt(key, value)?,
            "eval_data" => self.eval_data = parse_opt(key, value)?,
            "model" => self.model = parse_opt(key, value)?,
            "input" => self.input = parse_opt(key, value)?,
            "out" => self.out = parse_opt(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "lr_milestones" => {
                self.train.lr_milestones = if value.is_empty() || value == "none" {
                    Vec::new()
                } else {
                    value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_>>()?
                }
            }
            "lr_decay" => self.train.lr_decay = parse(key, value)?,
            "momentum" => self.train.momentum = parse(key, value)?,
            "weight_decay" => self.train.weight_decay = parse(key, value)?,
            "grad_clip" => self.train.grad_clip = parse_opt(key, value)?,
            "neg_ratio" => self.train.neg_ratio = parse(key, value)?,
            "m" => {
                self.train.m = parse(key, value)?;
                self.prune.m = self.train.m;
            }
            "match_threshold" => {
                self.train.match_threshold = parse(key, value)?;
                self.prune.match_threshold = self.train.match_threshold;
            }
            "eta" => self.prune.eta = parse(key, value)?,
            "alpha" => self.prune.alpha = parse(key, value)?,
            "gamma" => self.prune.gamma = parse(key, value)?,
            "epochs_per_layer" => self.prune.finetune_epochs_per_layer = parse(key, value)?,
            "finetune_lr" => self.prune.finetune_lr = parse(key, value)?,
            "finetune_batch_size" => self.prune.finetune_batch_size = parse(key, value)?,
            "finetune_images" => self.prune.finetune_images = parse_opt(key, value)?,
            "scoring_batches" => self.prune.scoring_batches = parse(key, value)?,
            "scoring_batch_size" => self.prune.scoring_batch_size = parse(key, value)?,
            "loss_scale" => self.prune.loss_scale = parse(key, value)?,
            "final_finetune_epochs" => self.prune.final_finetune_epochs = parse(key, value)?,
            "score_threshold" => self.eval.score_threshold = parse(key, value)?,
            "nms_iou" => self.eval.nms_iou = parse(key, value)?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "threads" => show_opt(&self.threads),
            "count" => self.count.to_string(),
            "data" => show_path(&self.data),
            "eval_data" => show_path(&self.eval_data),
            "model" => show_path(&self.model),
            "input" => show_path(&self.input),
            "out" => show_path(&self.out),
            "epochs" => self.train.epochs.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "lr" => self.train.lr.to_string(),
            "lr_milestones" => {
                let v: Vec<String> = self.train.lr_milestones.iter().map(usize::to_string).collect();
                if v.is_empty() {
                    "none".into()
                } else {
                    v.join(",")
                }
            }
            "lr_decay" => self.train.lr_decay.to_string(),
            "momentum" => self.train.momentum.to_string(),
            "weight_decay" => self.train.weight_decay.to_string(),
            "grad_clip" => show_opt(&self.train.grad_clip),
            "neg_ratio" => self.train.neg_ratio.to_string(),
            "m" => self.train.m.to_string(),
            "match_threshold" => self.train.match_threshold.to_string(),
            "eta" => self.prune.eta.to_string(),
            "alpha" => self.prune.alpha.to_string(),
            "gamma" => self.prune.gamma.to_string(),
            "epochs_per_layer" => self.prune.finetune_epochs_per_layer.to_string(),
            "finetune_lr" => self.prune.finetune_lr.to_string(),
            "finetune_batch_size" => self.prune.finetune_batch_size.to_string(),
            "finetune_images" => show_opt(&self.prune.finetune_images),
            "scoring_batches" => self.prune.scoring_batches.to_string(),
            "scoring_batch_size" => self.prune.scoring_batch_size.to_string(),
            "loss_scale" => self.prune.loss_scale.to_string(),
            "final_finetune_epochs" => self.prune.final_finetune_epochs.to_string(),
            "score_threshold" => self.eval.score_threshold.to_string(),
            "nms_iou" => self.eval.nms_iou.to_string(),
            _ => return None,
        })
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::InvalidArgument(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_text(&std::fs::read_to_string(path)?)
    }

    /// Resolved settings of `command` as a loadable config file.
    pub fn echo(&self, command: &str) -> String {
        let mut s = format!("# lcp {command}\n");
        for key in command_keys(command) {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("known key"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags_precedence() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nseed = 7\neta=0.75  # trailing\nalpha = 0\n\n").unwrap();
        assert_eq!((c.seed, c.train.seed, c.prune.seed), (7, 7, 7));
        assert_eq!(c.prune.eta, 0.75);
        c.set("alpha", "1.5").unwrap();
        assert_eq!(c.prune.alpha, 1.5);
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("seed = 3\nlr_milestones = 4, 9\ngrad_clip = none\nout = /tmp/x\nfinetune_images = 64").unwrap();
        for cmd in ["gen-data", "train", "prune", "eval", "report-gradients"] {
            let mut back = RunConfig::default();
            back.apply_text(&c.echo(cmd)).unwrap();
            assert_eq!(back.echo(cmd), c.echo(cmd));
        }
        let mut back = RunConfig::default();
        back.apply_text(&c.echo("train")).unwrap();
        assert_eq!(back.train, c.train);
    }

    #[test]
    fn bad_lines_are_reported() {
        let mut c = RunConfig::default();
        let e = c.apply_text("seed = 1\nnonsense\n").unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
        assert!(c.apply_text("colour = red").is_err());
        assert!(c.apply_text("eta = lots").is_err());
    }
}
