//! Training orchestration: prior-agent pretraining, the episode/step loop
//! with ε-greedy selection and experience replay, target syncs, the joint
//! objective, per-epoch evaluation, and checkpointing.
//!
//! One step processes one minibatch (one episode of `steps_per_episode`
//! decisions on a fixed state, since the next state equals the current
//! state). The replayed TD loss trains the diagnostic side; the focal loss
//! on the live batch trains everything reachable, and each prior agent is
//! fine-tuned with its own supervision and TD terms in the same pass.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::checkpoint::{Checkpoint, Record};
use super::optim::{AdamW, ParamGroup};
use super::run_config::RunConfig;
use crate::autodiff::{Scalar, Tensor};
use crate::data::{assemble_batch, load_manifest, Dataset, DatasetStats};
use crate::diagnostic::asl_loss;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, MetricsReport};
use crate::model::{Model, TargetCopy};
use crate::rl::{
    compute_reward, epsilon_at, q_values, select_actions, td_loss, td_target, total_loss,
    EpsilonSchedule, ReplayBuffer, Transition,
};
use crate::util::rng_for;

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct Counters {
    pub steps: usize,
    pub replay_pushes: usize,
    pub target_syncs: usize,
    pub skipped_replay_updates: usize,
    pub decisions: usize,
    pub explore_decisions: usize,
    pub explore_fallbacks: usize,
}

#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub val: MetricsReport,
    pub test: Option<MetricsReport>,
    pub loss_p: f64,
    pub loss_ptd: f64,
    pub loss_td: f64,
    pub loss_d: f64,
}

impl EpochRow {
    pub fn total_loss(&self) -> f64 {
        self.loss_p + self.loss_ptd + self.loss_td + self.loss_d
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub epochs: Vec<EpochRow>,
    pub counters: Counters,
    pub best_val_auc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainOutcome {
    /// First epoch (1-based) whose validation mean AUC reached `threshold`.
    pub fn epochs_to_reach(&self, threshold: f64) -> Option<usize> {
        self.epochs
            .iter()
            .find(|e| e.val.mean_auc.is_some_and(|a| a >= threshold))
            .map(|e| e.epoch)
    }

    /// Best test mean AUC seen over the run (falls back to validation when
    /// no test split was configured).
    pub fn best_test_auc(&self) -> Option<f64> {
        self.epochs
            .iter()
            .filter_map(|e| e.test.as_ref().and_then(|t| t.mean_auc).or(e.val.mean_auc))
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
    }
}

/// Report of what a prior-checkpoint load did to each parameter.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub transferred: Vec<String>,
    pub reinitialized: Vec<String>,
}

struct DatasetBundle {
    train: Dataset,
    val: Dataset,
    test: Option<Dataset>,
    stats: DatasetStats,
}

fn load_datasets(cfg: &RunConfig) -> Result<DatasetBundle> {
    let root = |p: &Path| p.parent().map(Path::to_path_buf).unwrap_or_default();
    let train = load_manifest(&cfg.train_manifest, &root(&cfg.train_manifest))?;
    let val = load_manifest(&cfg.eval_manifest, &root(&cfg.eval_manifest))?;
    let test = cfg
        .test_manifest
        .as_ref()
        .map(|p| load_manifest(p, &root(p)))
        .transpose()?;
    for (name, ds) in [("train", &train), ("eval", &val)] {
        if ds.classes != cfg.classes {
            return Err(Error::Config(format!(
                "{name} manifest has {} classes, config says {}",
                ds.classes, cfg.classes
            )));
        }
        if ds.height != cfg.image_size || ds.width != cfg.image_size {
            return Err(Error::Config(format!(
                "{name} images are {}x{}, config says {}",
                ds.width, ds.height, cfg.image_size
            )));
        }
    }
    let stats = DatasetStats::compute(&train)?;
    Ok(DatasetBundle {
        train,
        val,
        test,
        stats,
    })
}

fn prepare_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone();
    if dir.join("config.json").exists() && !cfg.overwrite {
        return Err(Error::Config(format!(
            "run directory {} already holds a run; pass overwrite to replace it",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(&dir, e))?;
    let echo = dir.join("config.json");
    std::fs::write(&echo, cfg.to_json()).map_err(|e| Error::io(&echo, e))?;
    Ok(dir)
}

fn prior_groups<S: Scalar>(model: &Model<S>) -> Vec<ParamGroup<S>> {
    let mut semantic = Vec::new();
    let mut visual = Vec::new();
    let mut bare = Vec::new();
    for (name, t) in model.prior_params() {
        if name.starts_with("semantic.") {
            semantic.push((name, t));
        } else if name.starts_with("visual.") {
            visual.push((name, t));
        } else {
            bare.push((name, t));
        }
    }
    let mut out = Vec::new();
    for (name, params) in [("semantic", semantic), ("visual", visual), ("bare", bare)] {
        if !params.is_empty() {
            out.push(ParamGroup {
                name: name.to_string(),
                params,
            });
        }
    }
    out
}

fn all_groups<S: Scalar>(model: &Model<S>) -> Vec<ParamGroup<S>> {
    // Algorithm-1 order: the diagnostic agent updates before the priors.
    let mut groups = vec![ParamGroup {
        name: "diagnostic".to_string(),
        params: model.diag_params(),
    }];
    groups.extend(prior_groups(model));
    groups
}

/// Per-sample ε-greedy decisions, rewards against the labels, and the
/// flattened action/reward vectors for the TD terms.
struct Decisions {
    actions: Vec<u8>,
    rewards: Vec<i8>,
    explored: usize,
    fallbacks: usize,
}

fn decide(
    probs: &[f64],
    labels: &[u8],
    classes: usize,
    eps: f64,
    tau: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Decisions> {
    let mut actions = Vec::with_capacity(probs.len());
    let mut rewards = Vec::with_capacity(probs.len());
    let mut explored = 0;
    let mut fallbacks = 0;
    for (row, lrow) in probs.chunks(classes).zip(labels.chunks(classes)) {
        let sel = select_actions(row, eps, tau, rng);
        explored += sel.explored as usize;
        fallbacks += sel.fallback as usize;
        rewards.extend(compute_reward(&sel.actions, lrow)?);
        actions.extend(sel.actions);
    }
    Ok(Decisions {
        actions,
        rewards,
        explored,
        fallbacks,
    })
}

fn stack_replay<S: Scalar>(
    batch: &[&Transition],
    hw: usize,
    d: usize,
) -> Result<(Tensor<S>, Tensor<S>, Vec<u8>, Vec<i8>)> {
    let b = batch.len();
    let mut cur = Vec::with_capacity(b * hw * d);
    let mut next = Vec::with_capacity(b * hw * d);
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    for t in batch {
        cur.extend(t.state.iter().map(|&v| S::from_f64(v as f64)));
        next.extend(t.next_state.iter().map(|&v| S::from_f64(v as f64)));
        actions.extend_from_slice(&t.actions);
        rewards.extend_from_slice(&t.rewards);
    }
    Ok((
        Tensor::leaf(cur, &[b, hw, d], false)?,
        Tensor::leaf(next, &[b, hw, d], false)?,
        actions,
        rewards,
    ))
}

fn check_finite(name: &str, v: f64, run_dir: &Path, step: usize, cx: &str) -> Result<()> {
    if v.is_finite() {
        return Ok(());
    }
    let dump = serde_json::json!({
        "failed_loss": name,
        "value_is_nan": v.is_nan(),
        "step": step,
        "context": cx,
    });
    let path = run_dir.join("nan_dump.json");
    let _ = std::fs::write(&path, serde_json::to_string_pretty(&dump).unwrap());
    Err(Error::Aborted(format!(
        "non-finite {name} at step {step}; diagnostic dump at {} and last-good checkpoint retained",
        path.display()
    )))
}

/// The main training loop (Algorithm-1 shape). Generic over the scalar so
/// the f64 gradient-check suites can drive tiny runs; production runs use
/// `f32`.
pub fn train<S: Scalar>(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let run_dir = prepare_run_dir(cfg)?;
    let data = load_datasets(cfg)?;
    let mcfg = cfg.model_config();
    let rl_cfg = cfg.rl_config();
    let rl = cfg.rl_enabled;

    let mut model: Model<S> = Model::new(&mcfg, cfg.toggles(), cfg.seed)?;
    let mut load_report = None;
    if let Some(ckpath) = &cfg.prior_checkpoint {
        let ck = Checkpoint::load(ckpath)?;
        load_report = Some(load_priors_into(&model, &ck)?);
    }
    if cfg.warm_start_embeddings {
        model.warm_start_embeddings(cfg.seed)?;
    }
    if let Some(rep) = &load_report {
        let path = run_dir.join("prior_load.json");
        let _ = std::fs::write(
            &path,
            serde_json::to_string_pretty(&serde_json::json!({
                "transferred": rep.transferred,
                "reinitialized": rep.reinitialized,
            }))
            .unwrap(),
        );
    }

    let mut target: Option<TargetCopy<S>> = if rl { Some(model.build_target()?) } else { None };

    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch * cfg.steps_per_episode;
    let sched = EpsilonSchedule::train(
        cfg.eps_min,
        cfg.epsilon_total_steps.unwrap_or(total_steps.max(1)),
    );
    let mut opt = AdamW::new(all_groups(&model), cfg.lr_max, cfg.weight_decay, total_steps);
    let replay_batch = cfg.replay_batch.unwrap_or(cfg.batch_size);
    let mut replay = ReplayBuffer::new(cfg.replay_capacity);

    let mut aug_rng = rng_for(cfg.seed, "augment");
    let mut act_diag_rng = rng_for(cfg.seed, "actions.diag");
    let mut act_sem_rng = rng_for(cfg.seed, "actions.semantic");
    let mut act_vis_rng = rng_for(cfg.seed, "actions.visual");
    let mut replay_rng = rng_for(cfg.seed, "replay.sample");

    let mut counters = Counters::default();
    let mut epochs: Vec<EpochRow> = Vec::new();
    let mut best_val_auc: Option<f64> = None;
    let mut best_epoch: Option<usize> = None;
    let mut stopped_early = false;
    let mut global_step = 0usize;
    let hw = mcfg.hw();

    let metrics_path = run_dir.join("metrics.csv");
    write_metrics_header(&metrics_path, cfg.classes)?;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &format!("batches.epoch{epoch}")));

        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut n_steps_epoch = 0usize;

        for batch_idx in order.chunks(cfg.batch_size) {
            // episode start: default target sync cadence is once per episode
            if rl && rl_cfg.target_sync_steps.is_none() {
                target.as_mut().unwrap().sync_from(&model)?;
                counters.target_syncs += 1;
            }
            for _t in 0..cfg.steps_per_episode {
                if rl {
                    if let Some(k) = rl_cfg.target_sync_steps {
                        if global_step % k.max(1) == 0 {
                            target.as_mut().unwrap().sync_from(&model)?;
                            counters.target_syncs += 1;
                        }
                    }
                }
                let (x, labels) =
                    assemble_batch::<S>(&data.train, batch_idx, data.stats, true, &mut aug_rng)?;
                let prior = model.extract_state(&x)?;
                let diag = model.diagnose(&prior.state)?;
                let eps = if rl { epsilon_at(global_step, &sched)? } else { 0.0 };

                let l_d = asl_loss(&diag.probs, &labels, cfg.gamma_pos, cfg.gamma_neg)?;

                let mut prior_ce = Vec::new();
                let mut prior_td = Vec::new();
                if let Some(sem) = &prior.semantic {
                    prior_ce.push(crate::agents::prior_loss(&sem.probs, &labels)?);
                    if rl {
                        let dec = decide(
                            &sem.probs.to_f64_vec(),
                            &labels,
                            cfg.classes,
                            eps,
                            cfg.tau,
                            &mut act_sem_rng,
                        )?;
                        let z = sem.logits.to_vec();
                        let y = td_target(&dec.rewards, &z, cfg.gamma);
                        let y_t = Tensor::leaf(y, sem.logits.shape(), false)?;
                        prior_td.push(td_loss(&q_values(&sem.logits, &dec.actions)?, &y_t)?);
                    }
                }
                if let Some(vis) = &prior.visual {
                    prior_ce.push(crate::agents::prior_loss(&vis.probs, &labels)?);
                    if rl {
                        let dec = decide(
                            &vis.probs.to_f64_vec(),
                            &labels,
                            cfg.classes,
                            eps,
                            cfg.tau,
                            &mut act_vis_rng,
                        )?;
                        let z = vis.logits.to_vec();
                        let y = td_target(&dec.rewards, &z, cfg.gamma);
                        let y_t = Tensor::leaf(y, vis.logits.shape(), false)?;
                        prior_td.push(td_loss(&q_values(&vis.logits, &dec.actions)?, &y_t)?);
                    }
                }

                let mut l_td = Tensor::scalar_value(S::zero());
                if rl {
                    // diagnostic decisions on the live batch, stored with a
                    // detached state copy and the unchanged next state
                    let dec = decide(
                        &diag.probs.to_f64_vec(),
                        &labels,
                        cfg.classes,
                        eps,
                        cfg.tau,
                        &mut act_diag_rng,
                    )?;
                    counters.decisions += batch_idx.len();
                    counters.explore_decisions += dec.explored;
                    counters.explore_fallbacks += dec.fallbacks;
                    let state_vals = prior.state.to_f64_vec();
                    for (i, _) in batch_idx.iter().enumerate() {
                        let row: Vec<f32> = state_vals[i * hw * mcfg.d..(i + 1) * hw * mcfg.d]
                            .iter()
                            .map(|&v| v as f32)
                            .collect();
                        replay.push(Transition {
                            state: row.clone(),
                            actions: dec.actions[i * cfg.classes..(i + 1) * cfg.classes].to_vec(),
                            rewards: dec.rewards[i * cfg.classes..(i + 1) * cfg.classes].to_vec(),
                            next_state: row,
                            episode: epoch,
                            step: global_step,
                        });
                        counters.replay_pushes += 1;
                    }

                    match replay.sample(replay_batch, &mut replay_rng) {
                        Some(minibatch) => {
                            let (states, next_states, actions, rewards) =
                                stack_replay::<S>(&minibatch, hw, mcfg.d)?;
                            let q_pass = model.diagnose(&states)?;
                            let q = q_values(&q_pass.logits, &actions)?;
                            let z_next = target
                                .as_ref()
                                .unwrap()
                                .logits_for_state(&next_states)?
                                .to_vec();
                            let y = td_target(&rewards, &z_next, cfg.gamma);
                            let y_t = Tensor::leaf(y, q.shape(), false)?;
                            l_td = td_loss(&q, &y_t)?;
                        }
                        None => counters.skipped_replay_updates += 1,
                    }
                }

                let lp_v: f64 = prior_ce.iter().map(|t| t.item().as_f64()).sum();
                let lptd_v: f64 = prior_td.iter().map(|t| t.item().as_f64()).sum();
                let ltd_v = l_td.item().as_f64();
                let ld_v = l_d.item().as_f64();
                let cx = format!("epoch {epoch}");
                check_finite("l_p", lp_v, &run_dir, global_step, &cx)?;
                check_finite("l_ptd", lptd_v, &run_dir, global_step, &cx)?;
                check_finite("l_td", ltd_v, &run_dir, global_step, &cx)?;
                check_finite("l_d", ld_v, &run_dir, global_step, &cx)?;

                if cfg.separate_updates {
                    let diag_total = l_td
                        .mul_scalar(S::from_f64(rl_cfg.lambda_td))
                        .add(&l_d.mul_scalar(S::from_f64(rl_cfg.lambda_d)))?;
                    diag_total.backward()?;
                    opt.step_groups(&["diagnostic"]);
                    opt.zero_grads();
                    if !prior_ce.is_empty() {
                        let mut p_total = Tensor::scalar_value(S::zero());
                        for l in &prior_ce {
                            p_total = p_total.add(&l.mul_scalar(S::from_f64(rl_cfg.lambda_p)))?;
                        }
                        for l in &prior_td {
                            p_total = p_total.add(&l.mul_scalar(S::from_f64(rl_cfg.lambda_ptd)))?;
                        }
                        p_total.backward()?;
                        opt.step_groups(&["semantic", "visual", "bare"]);
                        opt.zero_grads();
                    }
                } else {
                    let total = total_loss(&prior_ce, &prior_td, &l_td, &l_d, &rl_cfg)?;
                    total.backward()?;
                    opt.step();
                    opt.zero_grads();
                }

                sums.0 += lp_v;
                sums.1 += lptd_v;
                sums.2 += ltd_v;
                sums.3 += ld_v;
                n_steps_epoch += 1;
                global_step += 1;
                counters.steps += 1;
            }
        }

        let denom = n_steps_epoch.max(1) as f64;
        let eval_seed = cfg.seed.wrapping_add(epoch as u64 * 1_000_003);
        let val = evaluate(
            &model,
            &data.val,
            data.stats,
            &EvalOptions {
                batch_size: cfg.batch_size.max(16),
                bootstrap_resamples: cfg.bootstrap_resamples,
                seed: eval_seed,
            },
        )?;
        let test = data
            .test
            .as_ref()
            .map(|t| {
                evaluate(
                    &model,
                    t,
                    data.stats,
                    &EvalOptions {
                        batch_size: cfg.batch_size.max(16),
                        bootstrap_resamples: cfg.bootstrap_resamples,
                        seed: eval_seed ^ 0x5eed,
                    },
                )
            })
            .transpose()?;

        let row = EpochRow {
            epoch,
            val,
            test,
            loss_p: sums.0 / denom,
            loss_ptd: sums.1 / denom,
            loss_td: sums.2 / denom,
            loss_d: sums.3 / denom,
        };
        append_metrics_row(&metrics_path, cfg.classes, &row)?;

        let improved = match (row.val.mean_auc, best_val_auc) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            best_val_auc = row.val.mean_auc;
            best_epoch = Some(epoch);
            save_checkpoint(
                &run_dir.join("checkpoints").join("best.ckpt"),
                &model,
                &opt,
                target.as_ref(),
                data.stats,
                cfg,
                global_step,
                epoch,
                best_val_auc,
            )?;
        }
        save_checkpoint(
            &run_dir.join("checkpoints").join("last.ckpt"),
            &model,
            &opt,
            target.as_ref(),
            data.stats,
            cfg,
            global_step,
            epoch,
            best_val_auc,
        )?;

        let reached = cfg
            .early_stop_auc
            .is_some_and(|th| row.val.mean_auc.is_some_and(|a| a >= th));
        epochs.push(row);
        if reached {
            stopped_early = true;
            break;
        }
    }

    Ok(TrainOutcome {
        run_dir,
        epochs,
        counters,
        best_val_auc,
        best_epoch,
        stopped_early,
    })
}

/// Train only the prior agents (supervision + their TD terms) on a domain,
/// writing `priors.ckpt` for later warm starts.
pub fn pretrain_priors<S: Scalar>(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let run_dir = prepare_run_dir(cfg)?;
    let data = load_datasets(cfg)?;
    let mcfg = cfg.model_config();
    let mut toggles = cfg.toggles();
    toggles.decoder = false; // the diagnostic side is not trained here
    if !toggles.semantic && !toggles.visual {
        return Err(Error::Config(
            "pretrain-priors: enable at least one prior agent".to_string(),
        ));
    }
    let model: Model<S> = Model::new(&mcfg, toggles, cfg.seed)?;

    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let sched = EpsilonSchedule::train(
        cfg.eps_min,
        cfg.epsilon_total_steps.unwrap_or(total_steps.max(1)),
    );
    let mut opt = AdamW::new(prior_groups(&model), cfg.lr_max, cfg.weight_decay, total_steps);

    let mut aug_rng = rng_for(cfg.seed, "augment");
    let mut act_sem_rng = rng_for(cfg.seed, "actions.semantic");
    let mut act_vis_rng = rng_for(cfg.seed, "actions.visual");
    let mut global_step = 0usize;
    let mut trace = String::from("epoch,l_p,l_ptd\n");

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &format!("batches.epoch{epoch}")));
        let mut sums = (0.0f64, 0.0f64);
        let mut n = 0usize;
        for batch_idx in order.chunks(cfg.batch_size) {
            let (x, labels) =
                assemble_batch::<S>(&data.train, batch_idx, data.stats, true, &mut aug_rng)?;
            let prior = model.extract_state(&x)?;
            let eps = if cfg.rl_enabled {
                epsilon_at(global_step, &sched)?
            } else {
                0.0
            };

            let mut losses = Vec::new();
            let mut td_losses = Vec::new();
            for (out_probs, out_logits, rng) in [
                prior
                    .semantic
                    .as_ref()
                    .map(|s| (&s.probs, &s.logits, &mut act_sem_rng)),
                prior
                    .visual
                    .as_ref()
                    .map(|v| (&v.probs, &v.logits, &mut act_vis_rng)),
            ]
            .into_iter()
            .flatten()
            {
                losses.push(crate::agents::prior_loss(out_probs, &labels)?);
                if cfg.rl_enabled {
                    let dec = decide(
                        &out_probs.to_f64_vec(),
                        &labels,
                        cfg.classes,
                        eps,
                        cfg.tau,
                        rng,
                    )?;
                    let y = td_target(&dec.rewards, &out_logits.to_vec(), cfg.gamma);
                    let y_t = Tensor::leaf(y, out_logits.shape(), false)?;
                    td_losses.push(td_loss(&q_values(out_logits, &dec.actions)?, &y_t)?);
                }
            }

            let mut total = Tensor::scalar_value(S::zero());
            for l in &losses {
                total = total.add(&l.mul_scalar(S::from_f64(cfg.lambda_p)))?;
            }
            for l in &td_losses {
                total = total.add(&l.mul_scalar(S::from_f64(cfg.lambda_ptd)))?;
            }
            let lp_v: f64 = losses.iter().map(|t| t.item().as_f64()).sum();
            let lptd_v: f64 = td_losses.iter().map(|t| t.item().as_f64()).sum();
            check_finite("l_p", lp_v, &run_dir, global_step, "pretrain")?;
            check_finite("l_ptd", lptd_v, &run_dir, global_step, "pretrain")?;
            total.backward()?;
            opt.step();
            opt.zero_grads();
            sums.0 += lp_v;
            sums.1 += lptd_v;
            n += 1;
            global_step += 1;
        }
        let _ = writeln!(trace, "{epoch},{},{}", sums.0 / n as f64, sums.1 / n as f64);
    }

    let trace_path = run_dir.join("pretrain_metrics.csv");
    std::fs::write(&trace_path, trace).map_err(|e| Error::io(&trace_path, e))?;

    let ck_path = run_dir.join("priors.ckpt");
    let mut records = vec![
        Record::bytes("config", cfg.to_json().into_bytes()),
        Record::u64_scalar("meta/step", global_step as u64),
        Record::u64_scalar("meta/epoch", cfg.epochs as u64),
        Record::f64_scalar("meta/data_mean", data.stats.mean),
        Record::f64_scalar("meta/data_std", data.stats.std),
    ];
    for (name, t) in model.prior_params() {
        records.push(Record::scalar_tensor(
            &format!("param/{name}"),
            t.shape(),
            &t.to_vec(),
        ));
    }
    for (name, m, v) in opt.state_records() {
        records.push(Record::scalar_tensor(&format!("opt/m/{name}"), &[m.len()], &m));
        records.push(Record::scalar_tensor(&format!("opt/v/{name}"), &[v.len()], &v));
    }
    Checkpoint { records }.save(&ck_path)?;
    Ok(ck_path)
}

/// Copy prior-agent parameters from a pretraining checkpoint into `model`.
/// Class heads whose shape differs (different class count) are left at their
/// fresh initialization and reported; any other width mismatch is an error
/// naming both shapes.
pub fn load_priors_into<S: Scalar>(model: &Model<S>, ck: &Checkpoint) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    for (name, tensor) in model.prior_params() {
        let Some(rec) = ck.get(&format!("param/{name}")) else {
            report.reinitialized.push(name);
            continue;
        };
        if rec.shape != tensor.shape() {
            if name.contains(".head.") {
                report.reinitialized.push(name);
                continue;
            }
            return Err(Error::Config(format!(
                "prior checkpoint dimension mismatch for {name}: checkpoint {:?} vs target {:?}",
                rec.shape,
                tensor.shape()
            )));
        }
        let values = rec.payload.scalars::<S>().ok_or_else(|| {
            Error::Format(format!("checkpoint tensor {name}: unexpected dtype"))
        })?;
        tensor.set_data(&values);
        report.transferred.push(name);
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    model: &Model<S>,
    opt: &AdamW<S>,
    target: Option<&TargetCopy<S>>,
    stats: DatasetStats,
    cfg: &RunConfig,
    step: usize,
    epoch: usize,
    best_val_auc: Option<f64>,
) -> Result<()> {
    let mut records = vec![
        Record::bytes("config", cfg.to_json().into_bytes()),
        Record::u64_scalar("meta/step", step as u64),
        Record::u64_scalar("meta/epoch", epoch as u64),
        Record::f64_scalar("meta/best_val_auc", best_val_auc.unwrap_or(f64::NAN)),
        Record::f64_scalar("meta/data_mean", stats.mean),
        Record::f64_scalar("meta/data_std", stats.std),
    ];
    for (name, t) in model.all_params() {
        records.push(Record::scalar_tensor(
            &format!("param/{name}"),
            t.shape(),
            &t.to_vec(),
        ));
    }
    if let Some(tc) = target {
        for (name, t) in tc.params() {
            records.push(Record::scalar_tensor(
                &format!("target/{name}"),
                t.shape(),
                &t.to_vec(),
            ));
        }
    }
    for (name, m, v) in opt.state_records() {
        records.push(Record::scalar_tensor(&format!("opt/m/{name}"), &[m.len()], &m));
        records.push(Record::scalar_tensor(&format!("opt/v/{name}"), &[v.len()], &v));
    }
    Checkpoint { records }.save(path)
}

/// Restore every `param/` record into the model, erroring on any mismatch
/// and naming the offending tensor.
pub fn load_model_params<S: Scalar>(model: &Model<S>, ck: &Checkpoint) -> Result<()> {
    for (name, tensor) in model.all_params() {
        let rec = ck.get(&format!("param/{name}")).ok_or_else(|| {
            Error::Format(format!("checkpoint missing tensor param/{name}"))
        })?;
        if rec.shape != tensor.shape() {
            return Err(Error::Format(format!(
                "checkpoint tensor param/{name}: shape {:?} does not fit model shape {:?}",
                rec.shape,
                tensor.shape()
            )));
        }
        let values = rec.payload
            .scalars::<S>()
            .ok_or_else(|| Error::Format(format!("checkpoint tensor param/{name}: unexpected dtype")))?;
        tensor.set_data(&values);
    }
    Ok(())
}

fn write_metrics_header(path: &Path, classes: usize) -> Result<()> {
    let mut header = String::from("epoch,split");
    for c in 0..classes {
        let _ = write!(header, ",auc_class_{c}");
    }
    header.push_str(",mean_auc,ci_low,ci_high,l_p,l_ptd,l_td,l_d\n");
    std::fs::write(path, header).map_err(|e| Error::io(path, e))
}

fn format_metrics_row(
    classes: usize,
    epoch: usize,
    split: &str,
    rep: &MetricsReport,
    losses: (f64, f64, f64, f64),
) -> String {
    let mut row = format!("{epoch},{split}");
    for c in 0..classes {
        match rep.per_class_auc.get(c).copied().flatten() {
            Some(a) => {
                let _ = write!(row, ",{a}");
            }
            None => row.push(','),
        }
    }
    match rep.mean_auc {
        Some(m) => {
            let _ = write!(row, ",{m}");
        }
        None => row.push(','),
    }
    match rep.mean_ci {
        Some((lo, hi)) => {
            let _ = write!(row, ",{lo},{hi}");
        }
        None => row.push_str(",,"),
    }
    let _ = write!(
        row,
        ",{},{},{},{}\n",
        losses.0, losses.1, losses.2, losses.3
    );
    row
}

fn append_metrics_row(path: &Path, classes: usize, row: &EpochRow) -> Result<()> {
    let mut text = format_metrics_row(
        classes,
        row.epoch,
        "val",
        &row.val,
        (row.loss_p, row.loss_ptd, row.loss_td, row.loss_d),
    );
    if let Some(test) = &row.test {
        text.push_str(&format_metrics_row(
            classes,
            row.epoch,
            "test",
            test,
            (row.loss_p, row.loss_ptd, row.loss_td, row.loss_d),
        ));
    }
    use std::io::Write as _;
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
