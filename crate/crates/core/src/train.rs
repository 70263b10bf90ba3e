//! Training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{model_digest, ExperimentConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::harness::evaluate_model;
use crate::losses::LossBreakdown;
use crate::modality::Branch;
use crate::model::{set_loss, Model};
use crate::params::{AdamW, ParamGrads, Session};
use crate::synth::ScenePair;

/// Averages over one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total_loss: f64,
    pub l_f: f64,
    pub l_v: f64,
    pub l_t: f64,
    pub val_mr: Option<f64>,
    /// Mean instance weight per branch, ordered V, F, T; only with MBO.
    pub mean_lambda: Option<[f64; 3]>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// CSV text of an epoch log. Weight columns appear only when `mbo` is set.
pub fn epoch_log_csv(log: &[EpochRecord], mbo: bool) -> String {
    let mut out = String::from("epoch,total_loss,L_F,L_V,L_T,val_mr");
    if mbo {
        out.push_str(",lambda_V,lambda_F,lambda_T");
    }
    out.push('\n');
    for r in log {
        let _ = write!(out, "{},{},{},{},{},{}", r.epoch, r.total_loss, r.l_f, r.l_v, r.l_t, fmt_opt(r.val_mr));
        if mbo {
            let l = r.mean_lambda.unwrap_or([f64::NAN; 3]);
            let _ = write!(out, ",{},{},{}", l[0], l[1], l[2]);
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    epoch: usize,
    batch: usize,
    image_ids: Vec<&'a str>,
    losses: Vec<f64>,
    grad_norm: f64,
}

/// Trains from scratch on in-memory scenes.
///
/// `val` scenes (at most `cfg.data.val_scenes` of them) are scored with the
/// fusion branch after each epoch. A non-finite loss or gradient aborts with
/// [`Error::Divergence`]; when `dump_dir` is given a JSON diagnostic is
/// written there first.
pub fn train_scenes(
    cfg: &ExperimentConfig,
    train: &[ScenePair],
    val: &[ScenePair],
    dump_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("no training scenes".into()));
    }
    let mut model = Model::new(&cfg.model, cfg.seed)?;
    let mut opt = AdamW::new(&model.store, cfg.optim.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA076_1D64_78BD_642F);
    let targets: Vec<_> = train.iter().map(ScenePair::targets).collect();
    let val = &val[..val.len().min(cfg.data.val_scenes)];
    let mbo = cfg.mbo_enabled && model.branches().len() == 3;
    let mut log = Vec::with_capacity(cfg.optim.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.optim.epochs {
        let lr = cfg.optim.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut lam_sum = [0.0; 3];
        let mut lam_count = 0usize;
        for (bi, batch) in order.chunks(cfg.optim.batch_size).enumerate() {
            let mut acc = ParamGrads::zeros_like(&model.store);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let scene = &train[i];
                let mut s = Session::new(&model.store, true);
                let fwd = model.forward(&mut s, &scene.image_v, &scene.image_t)?;
                let (root, br): (_, LossBreakdown) = set_loss(&mut s, &fwd, &targets[i], &cfg.loss, mbo)?;
                losses.push(br.total);
                if !br.total.is_finite() {
                    break;
                }
                let grads = s.param_grads(&s.g.backward(root)?);
                acc.accumulate(&grads);
                sums[0] += br.total;
                sums[1] += br.branch_totals[Branch::Fusion.index()];
                sums[2] += br.branch_totals[Branch::Visible.index()];
                sums[3] += br.branch_totals[Branch::Thermal.index()];
                for l in &br.lambdas {
                    (0..3).for_each(|k| lam_sum[k] += l[k]);
                    lam_count += 1;
                }
            }
            acc.scale(1.0 / batch.len() as f64);
            let finite = losses.iter().all(|l| l.is_finite()) && acc.is_finite();
            let norm = if cfg.optim.grad_clip > 0.0 {
                acc.clip_global_norm(cfg.optim.grad_clip)
            } else {
                acc.global_norm()
            };
            if !finite || !norm.is_finite() {
                let msg = format!("non-finite loss or gradient in epoch {epoch}, batch {bi}");
                if let Some(dir) = dump_dir {
                    let dump = DivergenceDump {
                        epoch,
                        batch: bi,
                        image_ids: batch.iter().map(|&i| train[i].image_id()).collect(),
                        losses,
                        grad_norm: norm,
                    };
                    fs::create_dir_all(dir)?;
                    fs::write(
                        dir.join("divergence.json"),
                        serde_json::to_string_pretty(&dump).expect("serializable"),
                    )?;
                }
                return Err(Error::Divergence(msg));
            }
            opt.step(&mut model.store, &acc, lr);
        }
        let n = train.len() as f64;
        let val_mr = if val.is_empty() {
            None
        } else {
            let rows = evaluate_model(&model, val, &[Branch::Fusion], &cfg.eval)?;
            Some(rows[0].1.mr)
        };
        log.push(EpochRecord {
            epoch,
            total_loss: sums[0] / n,
            l_f: sums[1] / n,
            l_v: sums[2] / n,
            l_t: sums[3] / n,
            val_mr,
            mean_lambda: (mbo && lam_count > 0).then(|| lam_sum.map(|v| v / lam_count as f64)),
        });
    }
    Ok(TrainOutcome { model, log })
}

/// Reads the configured dataset, trains, and writes `checkpoint.bin`,
/// `epoch_log.csv` and `config.toml` into `cfg.out_dir`.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let train = crate::dataset::read_dataset(&cfg.data.root, &cfg.data.train_split)?;
    let val = if cfg.data.val_scenes > 0 {
        crate::dataset::read_dataset(&cfg.data.root, &cfg.data.test_split)?
    } else {
        Vec::new()
    };
    let out = train_scenes(cfg, &train, &val, Some(&cfg.out_dir))?;
    save_run(cfg, &out, &cfg.out_dir)?;
    Ok(out)
}

pub fn save_run(cfg: &ExperimentConfig, out: &TrainOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mbo = cfg.mbo_enabled && out.model.branches().len() == 3;
    fs::write(dir.join("epoch_log.csv"), epoch_log_csv(&out.log, mbo))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    save_model(&out.model, &dir.join("checkpoint.bin"))
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    crate::checkpoint::save(path, &model.store, &model_digest(&model.cfg))
}

/// Builds a model for `cfg` and fills it from a checkpoint whose digest must
/// match the configuration.
pub fn load_model(cfg: &ModelConfig, path: &Path) -> Result<Model> {
    let (digest, store) = crate::checkpoint::load(path)?;
    let expected = model_digest(cfg);
    if digest != expected {
        return Err(Error::DigestMismatch {
            expected,
            found: digest,
        });
    }
    let mut model = Model::new(cfg, 0)?;
    model.store.load_from(&store)?;
    Ok(model)
}
