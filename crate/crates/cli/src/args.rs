use std::path::{Path, PathBuf};

use clap::Args;
use polite_teacher::config::ResolvedConfig;

use crate::{CliError, CliResult};

/// Default output root when no run directory is given.
pub const RUNDIR_ENV: &str = "POLITE_TEACHER_RUNDIR";

pub fn output_root() -> PathBuf {
    std::env::var_os(RUNDIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// `root/stem`, or `root/stem-2`, `root/stem-3`, ... if that is taken.
pub fn fresh_dir(root: &Path, stem: &str) -> PathBuf {
    let first = root.join(stem);
    if !first.exists() {
        return first;
    }
    (2..)
        .map(|i| root.join(format!("{stem}-{i}")))
        .find(|p| !p.exists())
        .expect("unbounded search")
}

/// Configuration layers shared by every verb that trains or evaluates.
///
/// Precedence, lowest first: the profile defaults, `--config`, the dedicated
/// flags below, then `--set`. Every key of the resolved configuration can be
/// reached through `--set`; the dedicated flags cover the hyperparameters
/// people change most.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Default set: desk (single CPU core) or full (reference scale).
    #[arg(long, value_name = "desk|full")]
    pub profile: Option<String>,
    /// `key = value` file layered over the profile, e.g. a `config.resolved`.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Any configuration key, e.g. `--set mutual.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to a fresh directory under $POLITE_TEACHER_RUNDIR.
    #[arg(long, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,
    /// COCO-style training annotations; synthetic shapes when absent.
    #[arg(long, value_name = "FILE")]
    pub train_annotations: Option<PathBuf>,
    /// COCO-style validation annotations; synthetic shapes when absent.
    #[arg(long, value_name = "FILE")]
    pub val_annotations: Option<PathBuf>,
    /// Reuse a split manifest instead of drawing one.
    #[arg(long, value_name = "FILE")]
    pub split_manifest: Option<PathBuf>,
    /// Labelled fraction of the training set, e.g. 0.01, 0.02, 0.05 or 0.10.
    #[arg(long)]
    pub fraction: Option<f64>,

    /// Class-confidence threshold for pseudo-labels.
    #[arg(long)]
    pub tau_cls: Option<f64>,
    /// Mask-quality threshold for pseudo-label masks.
    #[arg(long)]
    pub tau_iou: Option<f64>,
    /// Weight of the unsupervised loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Teacher EMA decay.
    #[arg(long)]
    pub ema_alpha: Option<f64>,
    /// Learning rate of the mutual stage.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning rate of the burn-in stage.
    #[arg(long)]
    pub burnin_lr: Option<f64>,
    /// SGD momentum, both stages.
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Weight decay, both stages.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub burnin_steps: Option<usize>,
    #[arg(long)]
    pub mutual_steps: Option<usize>,
    /// Labelled images per step, both stages.
    #[arg(long)]
    pub batch_sup: Option<usize>,
    /// Unlabelled images per mutual step.
    #[arg(long)]
    pub batch_unsup: Option<usize>,
    /// Steps between validation passes, both stages.
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Validation passes without improvement before stopping (0 disables).
    #[arg(long)]
    pub patience: Option<usize>,
    /// Teacher detections per image turned into mask-head proposals.
    #[arg(long)]
    pub proposals: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub synthetic_images: Option<usize>,
    #[arg(long)]
    pub synthetic_seed: Option<u64>,
    /// Drop the mask-IoU head from the loss; the mask gate opens unless
    /// `--tau-iou` says otherwise.
    #[arg(long)]
    pub disable_maskiou: bool,
}

impl ConfigArgs {
    /// Flag layer as `(key, value)` pairs in application order.
    pub fn entries(&self) -> CliResult<Vec<(String, String)>> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        if let Some(p) = &self.profile {
            put("profile", p.clone());
        }
        if self.disable_maskiou {
            put("loss.use_maskiou", "false".into());
            put("ssl.tau_iou", "0".into());
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let num = |v: Option<f64>| v.map(|v| v.to_string());
        let int = |v: Option<usize>| v.map(|v| v.to_string());
        let flags: [(&[&str], Option<String>); 25] = [
            (&["seed"], self.seed.map(|s| s.to_string())),
            (&["run_dir"], path(&self.run_dir)),
            (&["data.train"], path(&self.train_annotations)),
            (&["data.val"], path(&self.val_annotations)),
            (&["data.split"], path(&self.split_manifest)),
            (&["data.fraction"], num(self.fraction)),
            (&["ssl.tau_cls"], num(self.tau_cls)),
            (&["ssl.tau_iou"], num(self.tau_iou)),
            (&["ssl.lambda"], num(self.lambda)),
            (&["ssl.ema_alpha"], num(self.ema_alpha)),
            (&["mutual.lr"], num(self.lr)),
            (&["burnin.lr"], num(self.burnin_lr)),
            (&["burnin.momentum", "mutual.momentum"], num(self.momentum)),
            (&["burnin.weight_decay", "mutual.weight_decay"], num(self.weight_decay)),
            (&["burnin.max_steps"], int(self.burnin_steps)),
            (&["mutual.max_steps"], int(self.mutual_steps)),
            (&["burnin.batch_sup", "mutual.batch_sup"], int(self.batch_sup)),
            (&["mutual.batch_unsup"], int(self.batch_unsup)),
            (&["burnin.eval_every", "mutual.eval_every"], int(self.eval_every)),
            (&["burnin.patience", "mutual.patience"], int(self.patience)),
            (&["ssl.proposals_per_image"], int(self.proposals)),
            (&["data.image_size"], int(self.image_size)),
            (&["data.num_classes"], int(self.num_classes)),
            (&["data.synthetic_images"], int(self.synthetic_images)),
            (&["data.synthetic_seed"], self.synthetic_seed.map(|s| s.to_string())),
        ];
        for (keys, value) in flags {
            if let Some(v) = value {
                for k in keys {
                    put(k, v.clone());
                }
            }
        }
        for s in &self.set {
            let Some((k, v)) = s.split_once('=') else {
                return Err(CliError::usage(format!("--set expects KEY=VALUE, got `{s}`")));
            };
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    /// Fully resolved configuration. Unknown keys and invalid values are usage errors.
    pub fn resolve(&self) -> CliResult<ResolvedConfig> {
        let text = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| {
                CliError::usage(format!("cannot read config file {}: {e}", p.display()))
            })?),
            None => None,
        };
        ResolvedConfig::resolve(text.as_deref(), &self.entries()?)
            .map_err(|e| CliError::usage(e.to_string()))
    }
}
