use crate::config::RunConfig;
use crate::{
    BaselineArgs, Cli, Cmd, EvalArgs, ExplainArgs, ExplainCmd, ModelFlags, SplitArgs, SynthArgs,
    TrainArgs,
};
use anyhow::{anyhow, bail, Context, Result};
use flowcast::analysis::{
    attention_map, cluster_embeddings, cluster_map_svg, residual_diff_grid, residual_grid,
    residual_heatmap_svg, write_attention_map, write_cluster_grid, write_influencers,
    write_residual_diff, write_residual_grid, DEFAULT_CELL_SIZE_M,
};
use flowcast::baselines::{fit_gravity, gravity_predict, origin_observations, radiation_predict};
use flowcast::geodata::{
    load_flows, load_regions, load_split, save_flows, save_regions, save_split, split_by_origin,
    synth_city, CrsMode, Dataset, SplitAssignment, SynthConfig,
};
use flowcast::locenc::EncoderConfig;
use flowcast::metrics::{od_maps, write_report, EvalReport};
use flowcast::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use flowcast::predict::{predict_dataset, write_predictions, Prediction};
use flowcast::rng::StreamKey;
use flowcast::train::{train, write_training_log, NormStats, TrainConfig};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

const DEFAULT_SEED: u64 = 1234;

struct Globals {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
    crs: CrsMode,
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let seed = cfg.get("seed", cli.seed, DEFAULT_SEED)?;
    let crs_name: String = cfg.get("crs", cli.crs, "planar".into())?;
    let crs: CrsMode = crs_name.parse()?;
    if let Some(threads) = cli.threads {
        cfg.note("threads", threads);
        flowcast::par::set_threads(threads).map_err(|e| anyhow!("thread pool: {e}"))?;
    }
    let out = cli.out.unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    let mut g = Globals { cfg, seed, out, crs };

    match cli.cmd {
        Cmd::Synth(args) => cmd_synth(&mut g, args),
        Cmd::Split(args) => cmd_split(&mut g, args),
        Cmd::Train(args) => cmd_train(&mut g, args),
        Cmd::Eval(args) => cmd_eval(&mut g, args),
        Cmd::Baseline(args) => cmd_baseline(&mut g, args),
        Cmd::Explain(args) => cmd_explain(&mut g, args),
    }
}

fn load_dataset(dir: &Path, crs: CrsMode) -> Result<Dataset> {
    let regions = load_regions(dir.join("regions.csv"))
        .with_context(|| format!("loading {}/regions.csv", dir.display()))?;
    let flows = load_flows(dir.join("flows.csv"), &regions)
        .with_context(|| format!("loading {}/flows.csv", dir.display()))?;
    Ok(Dataset::new(regions, flows, crs)?)
}

fn dataset_label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

fn origin_set<'a>(split: &'a SplitAssignment, name: &str) -> Result<&'a BTreeSet<String>> {
    split
        .origins_for(name)
        .ok_or_else(|| anyhow!("unknown split name {name:?} (expected train, val, or test)"))
}

fn cmd_synth(g: &mut Globals, args: SynthArgs) -> Result<()> {
    let defaults = SynthConfig::default();
    let config = SynthConfig {
        n_regions: g.cfg.get("synth.n_regions", args.n_regions, defaults.n_regions)?,
        extent_m: g.cfg.get("synth.extent_m", args.extent_m, defaults.extent_m)?,
        mass_exponent: g.cfg.get("synth.mass_exponent", args.mass_exponent, defaults.mass_exponent)?,
        base_decay: g.cfg.get("synth.base_decay", args.base_decay, defaults.base_decay)?,
        anisotropy: g.cfg.get("synth.anisotropy", args.anisotropy, defaults.anisotropy)?,
        anisotropy_axis: g.cfg.get(
            "synth.anisotropy_axis",
            args.anisotropy_axis,
            defaults.anisotropy_axis,
        )?,
        mean_outflow: g.cfg.get("synth.mean_outflow", args.mean_outflow, defaults.mean_outflow)?,
        population_log_mean: g.cfg.get(
            "synth.population_log_mean",
            None,
            defaults.population_log_mean,
        )?,
        population_log_sd: g.cfg.get("synth.population_log_sd", None, defaults.population_log_sd)?,
        feature_rate: g.cfg.get("synth.feature_rate", None, defaults.feature_rate)?,
    };
    let dataset = synth_city(&config, g.seed)?;
    save_regions(g.out.join("regions.csv"), &dataset.regions)?;
    save_flows(g.out.join("flows.csv"), &dataset.flows)?;

    // generator ground truth, for later recovery checks
    let truth = format!(
        "n_regions = {}\nextent_m = {}\nmass_exponent = {}\nbase_decay = {}\nanisotropy = {}\n\
         anisotropy_axis = {}\nmean_outflow = {}\nseed = {}\nlambda_max = {}\n",
        config.n_regions,
        config.extent_m,
        config.mass_exponent,
        config.base_decay,
        config.anisotropy,
        config.anisotropy_axis,
        config.mean_outflow,
        g.seed,
        dataset.lambda_max,
    );
    std::fs::write(g.out.join("ground_truth.txt"), truth)?;
    g.cfg.write_echo(&g.out)?;
    println!(
        "wrote {} regions, {} flows to {}",
        dataset.regions.len(),
        dataset.flows.len(),
        g.out.display()
    );
    Ok(())
}

fn cmd_split(g: &mut Globals, args: SplitArgs) -> Result<()> {
    let dataset = load_dataset(&args.data, g.crs)?;
    let ratios = (
        g.cfg.get("split.train_ratio", args.train_ratio, 0.70)?,
        g.cfg.get("split.val_ratio", args.val_ratio, 0.10)?,
        g.cfg.get("split.test_ratio", args.test_ratio, 0.20)?,
    );
    let split = split_by_origin(&dataset, ratios, g.seed)?;
    save_split(g.out.join("split.csv"), &split)?;
    g.cfg.write_echo(&g.out)?;
    println!(
        "split {} origins into {}/{}/{} (train/val/test)",
        split.train_origins.len() + split.val_origins.len() + split.test_origins.len(),
        split.train_origins.len(),
        split.val_origins.len(),
        split.test_origins.len()
    );
    Ok(())
}

fn resolve_model_config(
    cfg: &mut RunConfig,
    flags: &ModelFlags,
    lambda_max: f64,
) -> Result<ModelConfig> {
    let defaults = ModelConfig::new(lambda_max);
    let d_loc = cfg.get("model.d_loc", flags.d_loc, defaults.encoder.d_loc)?;
    let model = ModelConfig {
        d_geo: cfg.get("model.d_geo", flags.d_geo, defaults.d_geo)?,
        encoder: EncoderConfig::new(
            cfg.get("model.lambda_min", flags.lambda_min, defaults.encoder.lambda_min)?,
            lambda_max,
            cfg.get("model.n_scales", flags.n_scales, defaults.encoder.n_scales)?,
            d_loc,
        ),
        n_layers: cfg.get("model.n_layers", flags.n_layers, defaults.n_layers)?,
        n_heads: cfg.get("model.n_heads", flags.n_heads, defaults.n_heads)?,
        ffn_hidden: cfg.get("model.ffn_hidden", flags.ffn_hidden, defaults.ffn_hidden)?,
        dropout: cfg.get("model.dropout", flags.dropout, defaults.dropout)?,
        rle_variant: cfg
            .get("model.variant", flags.variant.clone(), defaults.rle_variant.to_string())?
            .parse()?,
        predictor_variant: cfg
            .get(
                "model.predictor",
                flags.predictor.clone(),
                defaults.predictor_variant.to_string(),
            )?
            .parse()?,
        max_destinations: cfg.get(
            "model.max_destinations",
            flags.max_destinations,
            defaults.max_destinations,
        )?,
        scaled_attention: cfg.get("model.scaled_attention", flags.scaled_attention, false)?,
    };
    cfg.note("model.lambda_max", lambda_max);
    Ok(model)
}

fn cmd_train(g: &mut Globals, args: TrainArgs) -> Result<()> {
    let dataset = load_dataset(&args.data, g.crs)?;
    let split = load_split(&args.split)
        .with_context(|| format!("loading split manifest {}", args.split.display()))?;
    let model_config = resolve_model_config(&mut g.cfg, &args.model, dataset.lambda_max)?;
    let defaults = TrainConfig::default();
    let train_config = TrainConfig {
        learning_rate: g.cfg.get("train.learning_rate", args.learning_rate, defaults.learning_rate)?,
        momentum: g.cfg.get("train.momentum", args.momentum, defaults.momentum)?,
        rmsprop_alpha: g.cfg.get("train.rmsprop_alpha", args.rmsprop_alpha, defaults.rmsprop_alpha)?,
        rmsprop_eps: g.cfg.get("train.rmsprop_eps", args.rmsprop_eps, defaults.rmsprop_eps)?,
        batch_origins: g.cfg.get("train.batch_origins", args.batch_origins, defaults.batch_origins)?,
        patience: g.cfg.get("train.patience", args.patience, defaults.patience)?,
        max_epochs: g.cfg.get("train.max_epochs", args.max_epochs, defaults.max_epochs)?,
        seed: g.seed,
    };

    let outcome = train(&dataset, &split, &model_config, &train_config)?;
    let ckpt = g.out.join("model.ckpt");
    save_checkpoint(&ckpt, &outcome.params, &model_config, &outcome.stats.to_extras())?;
    write_training_log(g.out.join("training_log.csv"), &outcome.log)?;
    g.cfg.note("result.best_epoch", outcome.best_epoch);
    g.cfg.note("result.best_val_loss", format!("{:.6}", outcome.best_val_loss));
    g.cfg.write_echo(&g.out)?;
    println!(
        "trained {} epochs, best val loss {:.6} at epoch {}; checkpoint {}",
        outcome.log.len(),
        outcome.best_val_loss,
        outcome.best_epoch,
        ckpt.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(ModelParams, ModelConfig, NormStats)> {
    let (params, config, extras) = load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let stats = NormStats::from_extras(&extras)?;
    Ok((params, config, stats))
}

fn eval_and_report(
    g: &mut Globals,
    preds: &[Prediction],
    model_name: &str,
    dataset_name: &str,
    split_name: &str,
    predictions_file: &str,
) -> Result<()> {
    write_predictions(g.out.join(predictions_file), preds)?;
    let (pred, real) = od_maps(preds);
    let report = EvalReport::compute(model_name, dataset_name, split_name, &pred, &real)?;
    write_report(g.out.join("reports.csv"), std::slice::from_ref(&report))?;
    println!(
        "{model_name} on {dataset_name}/{split_name}: cpc {:.4}, mae {:.4}, rmse {:.4} over {} pairs",
        report.cpc, report.mae, report.rmse, report.n_pairs
    );
    Ok(())
}

fn cmd_eval(g: &mut Globals, args: EvalArgs) -> Result<()> {
    let dataset = load_dataset(&args.data, g.crs)?;
    let split = load_split(&args.split)?;
    let (params, config, stats) = load_model(&args.checkpoint)?;
    if (config.encoder.lambda_max - dataset.lambda_max).abs() > 1e-6 * dataset.lambda_max {
        bail!(
            "checkpoint was trained for lambda_max {} but the dataset has {}",
            config.encoder.lambda_max,
            dataset.lambda_max
        );
    }
    let origins = origin_set(&split, &args.split_name)?;
    let name = args.name.clone().unwrap_or_else(|| format!("nn_{}", config.rle_variant));
    let preds = predict_dataset(&dataset, origins, &params, &config, &stats)?;
    g.cfg.note("eval.checkpoint", args.checkpoint.display());
    g.cfg.note("eval.split_name", &args.split_name);
    eval_and_report(g, &preds, &name, &dataset_label(&args.data), &args.split_name, "predictions.csv")?;
    g.cfg.write_echo(&g.out)?;
    Ok(())
}

fn cmd_baseline(g: &mut Globals, args: BaselineArgs) -> Result<()> {
    let dataset = load_dataset(&args.data, g.crs)?;
    let split = load_split(&args.split)?;
    let origins = origin_set(&split, &args.split_name)?;
    let label = dataset_label(&args.data);
    g.cfg.note("baseline.model", &args.model);
    g.cfg.note("baseline.split_name", &args.split_name);
    match args.model.as_str() {
        "gravity" => {
            let obs = origin_observations(&dataset, &split.train_origins)?;
            let fit = fit_gravity(&obs)?;
            g.cfg.note("gravity.beta", format!("{:.3}", fit.params.beta));
            g.cfg.note("gravity.gamma", format!("{:.3}", fit.params.gamma));
            g.cfg.note("gravity.boundary_warning", fit.boundary);
            if fit.boundary {
                eprintln!("warning: gravity fit landed on the search boundary");
            }
            let preds = gravity_predict(&dataset, origins, &fit.params)?;
            eval_and_report(g, &preds, "gravity", &label, &args.split_name, "predictions_gravity.csv")?;
        }
        "radiation" => {
            let (preds, warned) = radiation_predict(&dataset, origins)?;
            g.cfg.note("radiation.uniform_fallback", warned);
            if warned {
                eprintln!("warning: radiation fell back to a uniform allocation for some origin");
            }
            let preds_vec = preds;
            eval_and_report(
                g,
                &preds_vec,
                "radiation",
                &label,
                &args.split_name,
                "predictions_radiation.csv",
            )?;
        }
        other => bail!("unknown baseline {other:?} (expected gravity or radiation)"),
    }
    g.cfg.write_echo(&g.out)?;
    Ok(())
}

fn cmd_explain(g: &mut Globals, args: ExplainArgs) -> Result<()> {
    let dataset = load_dataset(&args.data, g.crs)?;
    let (params, config, stats) = load_model(&args.checkpoint)?;
    g.cfg.note("explain.checkpoint", args.checkpoint.display());
    match &args.what {
        ExplainCmd::Attention { origin } => {
            let by_origin = dataset.flows_by_origin();
            let flows = by_origin
                .get(origin)
                .ok_or_else(|| anyhow!("origin {origin:?} has no flows in this dataset"))?;
            let (regions, _) =
                flowcast::train::normalize_features(&dataset.regions, Some(&stats))?;
            let centroids = dataset.planar_centroids();
            let batch = flowcast::train::build_origin_batch(
                origin,
                flows,
                &regions,
                &centroids,
                dataset.lambda_max,
                config.max_destinations,
                StreamKey::new(g.seed).with_str("explain").with_str(origin),
            )?;
            let map = attention_map(&batch, &params, &config, 10)?;
            write_attention_map(g.out.join("attention.csv"), &map)?;
            write_influencers(g.out.join("influencers.csv"), &map)?;
            g.cfg.note("explain.origin", origin);
            println!("wrote attention map over {} destinations", map.dest_ids.len());
        }
        ExplainCmd::Clusters { grid_n, k } => {
            let rle = params
                .rle
                .as_ref()
                .ok_or_else(|| anyhow!("checkpoint has no location encoder (variant none)"))?;
            let grid_n = g.cfg.get("explain.grid_n", *grid_n, 100)?;
            let k = g.cfg.get("explain.k", *k, 10)?;
            let grid =
                cluster_embeddings(rle, &config.encoder, config.encoder.lambda_max, grid_n, k)?;
            if grid.degenerate {
                eprintln!("warning: all grid embeddings identical; single cluster returned");
            }
            write_cluster_grid(g.out.join("clusters.csv"), &grid)?;
            if args.svg {
                std::fs::write(g.out.join("clusters.svg"), cluster_map_svg(&grid, 6.0))?;
            }
            println!("wrote {} cluster labels", grid.labels.len());
        }
        ExplainCmd::Residuals { split, compare, cell_size } => {
            let split = load_split(split)?;
            let cell = g.cfg.get("explain.cell_size", *cell_size, DEFAULT_CELL_SIZE_M)?;
            let preds =
                predict_dataset(&dataset, &split.test_origins, &params, &config, &stats)?;
            let grid = residual_grid(&preds, &dataset, cell)?;
            if grid.clamped > 0 {
                eprintln!("warning: {} flows fell outside the grid extent", grid.clamped);
            }
            write_residual_grid(g.out.join("residuals.csv"), &grid)?;
            if args.svg {
                std::fs::write(g.out.join("residuals.svg"), residual_heatmap_svg(&grid, 2.0))?;
            }
            if let Some(other) = compare {
                let (p2, c2, s2) = load_model(other)?;
                let preds2 = predict_dataset(&dataset, &split.test_origins, &p2, &c2, &s2)?;
                let grid2 = residual_grid(&preds2, &dataset, cell)?;
                let diff = residual_diff_grid(&grid, &grid2)?;
                write_residual_diff(g.out.join("residual_diff.csv"), &diff)?;
                g.cfg.note("explain.compare", other.display());
            }
            println!("wrote residual grid with {} occupied cells", grid.cells.len());
        }
    }
    g.cfg.write_echo(&g.out)?;
    Ok(())
}
