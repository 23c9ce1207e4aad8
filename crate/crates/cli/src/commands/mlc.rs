use spen_core::autodiff::{ParamStore, Tensor};
use spen_core::data::{example_f1, read_mlc, MlcDataset};
use spen_core::energy::MlcEnergy;
use spen_core::inference::Role;
use spen_core::rng_from_seed;
use spen_core::train::{
    init_energy_from_pretrained, minimax_train, pretrain_mlc, predict_sets, retune as retune_psi, tune_threshold,
    MlcData, MlcRetune, MlcSpenTask,
};

use super::Ctx;
use crate::bundle::{MlcModel, NetPart};
use crate::config::{Decoder, RunConfig};
use crate::error::{CliError, CliResult};
use crate::model::ModelFile;

fn all(ds: &MlcDataset) -> Vec<usize> {
    (0..ds.len()).collect()
}

fn read(cfg: &RunConfig, key: &str) -> CliResult<Option<MlcDataset>> {
    let path = match key {
        "data.train" => &cfg.data.train,
        "data.dev" => &cfg.data.dev,
        "data.test" => &cfg.data.test,
        _ => &cfg.data.unlabeled,
    };
    Ok(path.as_deref().map(read_mlc).transpose()?)
}

fn required(cfg: &RunConfig, key: &str) -> CliResult<MlcDataset> {
    read(cfg, key)?.ok_or_else(|| CliError::Config(format!("{key} must be set for this command")))
}

fn check_dims(model: &MlcModel, ds: &MlcDataset, key: &str) -> CliResult<()> {
    if ds.num_features > model.widths[0] || ds.num_labels > model.num_labels() {
        return Err(CliError::Config(format!(
            "{key}: data has {} features / {} labels, model expects {} / {}",
            ds.num_features,
            ds.num_labels,
            model.widths[0],
            model.num_labels()
        )));
    }
    Ok(())
}

/// Dense inputs padded to the model's feature count.
fn inputs(model: &MlcModel, ds: &MlcDataset) -> Tensor {
    let mut d = ds.clone();
    d.num_features = model.widths[0];
    d.dense_inputs(&all(ds))
}

/// Example F1 of `net` at threshold `tau` on a split.
fn f1(model: &MlcModel, net: &NetPart, tau: f64, ds: &MlcDataset) -> CliResult<f64> {
    let probs = net.net.predict(&net.store, &inputs(model, ds))?;
    Ok(example_f1(&predict_sets(&probs, tau), &ds.gold_sets())?)
}

fn tune(model: &MlcModel, net: &NetPart, dev: &MlcDataset) -> CliResult<(f64, f64)> {
    let probs = net.net.predict(&net.store, &inputs(model, dev))?;
    Ok(tune_threshold(&probs, &dev.gold_sets())?)
}

fn load(cfg: &RunConfig) -> CliResult<MlcModel> {
    MlcModel::from_file(&ModelFile::read(cfg.require("data.model", &cfg.data.model)?)?)
}

fn feature_data(model: &MlcModel, ds: &MlcDataset) -> CliResult<MlcData> {
    let mut d = ds.clone();
    d.num_features = model.widths[0];
    d.num_labels = model.num_labels();
    Ok(MlcData::new(&d, &model.feature.net, &model.feature.store)?)
}

pub(super) fn train_spen(ctx: &mut Ctx) -> CliResult<()> {
    let cfg = ctx.cfg;
    let train = required(cfg, "data.train")?;
    let dev = required(cfg, "data.dev")?;
    let test = read(cfg, "data.test")?;
    let num_features = [Some(&train), Some(&dev), test.as_ref()].iter().flatten().map(|d| d.num_features).max().unwrap();
    let num_labels = [Some(&train), Some(&dev), test.as_ref()].iter().flatten().map(|d| d.num_labels).max().unwrap();
    let mut widths = vec![num_features];
    widths.extend(&cfg.model.mlc_hidden);
    widths.push(num_labels);
    if widths.len() < 3 {
        return Err(CliError::Config("model.mlc_hidden needs at least one layer".into()));
    }
    let mut feature = NetPart::mlc(Role::Anchor, &widths, cfg.seed)?;
    let mut model = MlcModel {
        widths: widths.clone(),
        feature: feature.clone(),
        feature_tau: 0.0,
        energy: None,
        phi: None,
        psi: None,
        tau: None,
        seed: cfg.seed,
    };
    let x = inputs(&model, &train);
    let mut train_full = train.clone();
    train_full.num_labels = num_labels;
    let gold = train_full.gold_matrix(&all(&train));
    let dev_x = inputs(&model, &dev);
    let dev_gold = dev.gold_sets();
    let fit = pretrain_mlc(
        &feature.net,
        &mut feature.store,
        &x,
        &gold,
        Some((&dev_x, &dev_gold)),
        &cfg.pretrain_plan(),
        &mut ctx.log,
    )?;
    ctx.fit("local", &fit);
    model.feature = feature;
    let (tau0, dev0) = tune(&model, &model.feature, &dev)?;
    model.feature_tau = tau0;
    ctx.metric("dev.local", "f1", dev0)?;
    ctx.report.add("local", "tau", tau0);
    if let Some(t) = &test {
        ctx.metric("test.local", "f1", f1(&model, &model.feature, tau0, t)?)?;
    }

    let train_data = feature_data(&model, &train)?;
    let dev_data = feature_data(&model, &dev)?;
    let mut theta = ParamStore::new();
    let feat_dim = widths[widths.len() - 2];
    let energy = MlcEnergy::new(&mut theta, num_labels, feat_dim, cfg.model.energy_interactions, &mut rng_from_seed(cfg.seed.wrapping_add(1)))?;
    init_energy_from_pretrained(&energy, &mut theta, &model.feature.net, &model.feature.store)?;
    let mut phi = if cfg.model.pretrained_phi {
        model.feature.with_role(Role::CostAugmented)
    } else {
        NetPart::mlc(Role::CostAugmented, &widths, cfg.seed.wrapping_add(2))?
    };
    let plan = cfg.train_plan();
    let task = MlcSpenTask {
        energy: &energy,
        net: &phi.net,
        train: &train_data,
        dev: &dev_data,
        plan: &plan,
        anchor: Some(&model.feature.store),
    };
    let out = minimax_train(&task, &plan, &mut theta, &mut phi.store, &mut ctx.log)?;
    ctx.report.add("spen", "epochs_run", out.epochs_run);
    ctx.report.add("spen", "best_epoch", out.best_epoch);
    ctx.report.add("spen", "best_dev_metric", out.best_metric);
    let (tau, dev_f1) = tune(&model, &phi, &dev)?;
    model.tau = Some(tau);
    model.energy = Some((energy, theta));
    model.psi = Some(phi.with_role(Role::TestTime));
    model.phi = Some(phi);
    ctx.report.add("spen", "tau", tau);
    ctx.metric("dev.spen", "f1", dev_f1)?;
    if let Some(t) = &test {
        ctx.metric("test.spen", "f1", f1(&model, model.psi.as_ref().unwrap(), tau, t)?)?;
    }
    ctx.save(&model.to_file())
}

pub(super) fn retune(ctx: &mut Ctx) -> CliResult<()> {
    let cfg = ctx.cfg;
    let mut model = load(cfg)?;
    let (set, source) = match read(cfg, "data.unlabeled")? {
        Some(d) => (d, "unlabeled"),
        None => (
            read(cfg, "data.dev")?.ok_or_else(|| CliError::Config("data.unlabeled or data.dev must be set for retune".into()))?,
            "dev",
        ),
    };
    check_dims(&model, &set, "retune set")?;
    let mut psi = match (&model.psi, &model.phi) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => p.with_role(Role::TestTime),
        _ => return Err(CliError::Config("data.model: retune needs a model with an inference network".into())),
    };
    let (energy, theta) = model
        .energy
        .as_ref()
        .ok_or_else(|| CliError::Config("data.model: retune needs a model with an energy".into()))?;
    let data = feature_data(&model, &set)?;
    ctx.report.add("retune", "inputs", source);
    ctx.report.add("retune", "num_inputs", data.len());
    let task = MlcRetune {
        energy,
        net: &psi.net,
        data: &data,
    };
    let out = retune_psi(&task, &cfg.retune_plan(), theta, &mut psi.store, &mut ctx.log)?;
    ctx.metric("retune", "initial_energy", out.initial_energy)?;
    ctx.metric("retune", "final_energy", out.final_energy)?;
    ctx.report.add("retune", "reverted", out.reverted);
    ctx.report.add("retune", "epochs_run", out.epochs_run);
    if let Some(dev) = read(cfg, "data.dev")? {
        let (tau, dev_f1) = tune(&model, &psi, &dev)?;
        model.tau = Some(tau);
        ctx.report.add("retune", "tau", tau);
        ctx.metric("dev.psi", "f1", dev_f1)?;
    }
    if let (Some(t), Some(tau)) = (read(cfg, "data.test")?, model.tau) {
        ctx.metric("test.psi", "f1", f1(&model, &psi, tau, &t)?)?;
    }
    model.psi = Some(psi);
    ctx.save(&model.to_file())
}

/// Evaluates with the stored thresholds; nothing is re-tuned.
pub(super) fn eval(ctx: &mut Ctx) -> CliResult<()> {
    let cfg = ctx.cfg;
    if cfg.data.dev.is_none() && cfg.data.test.is_none() {
        return Err(CliError::Config("data.dev or data.test must be set for eval".into()));
    }
    let model = load(cfg)?;
    let (label, net, tau) = match (cfg.eval.decoder, model.decoder_net()) {
        (Decoder::Viterbi, _) => return Err(CliError::Config("eval.decoder: viterbi needs task = seq".into())),
        (_, Some(d)) => d,
        (Decoder::Auto, None) => ("local", &model.feature, model.feature_tau),
        (Decoder::Infnet, None) => return Err(CliError::Config("eval.decoder: model has no inference network".into())),
    };
    ctx.report.add("eval", "decoder", label);
    ctx.report.add("eval", "tau", tau);
    for key in ["data.dev", "data.test"] {
        if let Some(ds) = read(cfg, key)? {
            check_dims(&model, &ds, key)?;
            let split = key.trim_start_matches("data.");
            ctx.metric(&format!("{split}.{label}"), "f1", f1(&model, net, tau, &ds)?)?;
        }
    }
    Ok(())
}
