use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args};
use serde::Serialize;
use serde_json::json;

use choicekit::data::{self, ChoiceDataset, Schema};
use choicekit::hpo::{self, HyperSpace, Leaderboard, Metric, SearchOptions};
use choicekit::interpret::{self, ElasticityMatrix};
use choicekit::io::{load_model, save_model};
use choicekit::math::RngStream;
use choicekit::models::{ArchSpec, Family};
use choicekit::synth::{self, DgpSpec};
use choicekit::training::{self, EvalReport, HyperConfig, TrainedModel};

use crate::manifest::RunManifest;
use crate::{Failure, Stage};

fn parse_family(s: &str) -> Result<Family, String> {
    s.parse().map_err(|e: choicekit::Error| e.to_string())
}

#[derive(Args)]
pub struct TrainArgs {
    /// Wide choice CSV.
    #[arg(long)]
    data: PathBuf,
    /// JSON column layout of the CSV.
    #[arg(long)]
    schema: PathBuf,
    /// mnl, nl, fdnn or asudnn; optional when --config names an architecture.
    #[arg(long, value_parser = parse_family)]
    family: Option<Family>,
    /// JSON training config; defaults depend on the family.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the split and for training; overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct SearchArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// One or more families, comma separated.
    #[arg(long, value_parser = parse_family, value_delimiter = ',', required = true)]
    family: Vec<Family>,
    /// JSON hyperparameter space; defaults to the full grid.
    #[arg(long)]
    space: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Trials run concurrently; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Retrain the best N configs on train+val and save them.
    #[arg(long, default_value_t = 0)]
    refit_top: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(group(ArgGroup::new("analysis").required(true).args(["sweep", "elasticity", "iia"])))]
pub struct InterpretArgs {
    /// Model file; repeat to average elasticities over several models.
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// alt:attr:lo:hi:steps, in raw units.
    #[arg(long)]
    sweep: Option<String>,
    #[arg(long)]
    elasticity: bool,
    #[arg(long)]
    iia: bool,
    /// Relative perturbation for elasticities.
    #[arg(long, default_value_t = 0.01)]
    perturbation: f64,
    #[arg(long, default_value_t = 1000)]
    probes: usize,
    /// Seed of the IIA probes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Take means over the training part of the 4:1:1 split with this seed
    /// instead of over the whole file.
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct SynthArgs {
    /// JSON data-generating process.
    #[arg(long)]
    dgp: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::data("writing outputs", format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::data("writing outputs", e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Failure::data("writing outputs", format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, stage: &str) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::data(stage, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::data(stage, format!("{}: {e}", path.display())))
}

fn require_file(path: &Path, stage: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::data(stage, format!("{}: no such file", path.display())))
    }
}

fn load_data(data: &Path, schema: &Path) -> Result<ChoiceDataset, Failure> {
    require_file(schema, "loading schema")?;
    let schema = Schema::from_json_file(schema).stage("loading schema")?;
    require_file(data, "loading data")?;
    data::load_csv(data, &schema).stage("loading data")
}

fn default_config(family: Family) -> Result<HyperConfig, Failure> {
    let dnn = |arch| HyperConfig {
        l1: 1e-5,
        l2: 1e-5,
        dropout: 1e-3,
        batch_norm: true,
        ..HyperConfig::linear(arch, 0.01, 5000, 200)
    };
    match family {
        Family::Mnl => Ok(HyperConfig::linear(ArchSpec::Mnl, 0.1, 5000, 100)),
        Family::Nl => Err(Failure::usage(
            "resolving the config",
            "nested logit needs --config with a nest partition",
        )),
        Family::Fdnn => Ok(dnn(ArchSpec::Fdnn { depth: 3, width: 60 })),
        Family::Asudnn => Ok(dnn(ArchSpec::Asudnn {
            pre_depth: 2,
            post_depth: 1,
            pre_width: 40,
            post_width: 40,
        })),
    }
}

#[derive(Serialize)]
struct TrainReport {
    family: Family,
    train: EvalReport,
    val: EvalReport,
    test: EvalReport,
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p, "loading config")?;
            read_json::<HyperConfig>(p, "loading config")?
        }
        None => {
            let family = a
                .family
                .ok_or_else(|| Failure::usage("resolving the config", "give --family or --config"))?;
            default_config(family)?
        }
    };
    if let Some(f) = a.family {
        if cfg.arch.family() != f {
            return Err(Failure::usage(
                "resolving the config",
                format!("--family {f} conflicts with the config's {}", cfg.arch.family()),
            ));
        }
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate().stage("resolving the config")?;

    let outputs = ["model.bin", "history.csv", "eval.json"].map(String::from);
    let mut manifest = RunManifest::new("train", cfg.seed, serde_json::to_value(&cfg).expect("config serializes"));
    for p in [Some(&a.data), Some(&a.schema), a.config.as_ref()].into_iter().flatten() {
        manifest.input(p)?;
    }
    manifest.outputs(&a.out, &outputs);
    manifest.write(&a.out)?;

    let ds = load_data(&a.data, &a.schema)?;
    cfg.arch.validate(ds.num_alternatives()).stage("resolving the config")?;
    let split = data::split(&ds, cfg.seed).stage("splitting data")?;
    let model = training::train(&split.train, Some(&split.val), &cfg).stage("training")?;
    save_model(&model, a.out.join("model.bin")).stage("writing outputs")?;
    model
        .history
        .write_csv(create(&a.out.join("history.csv"))?)
        .stage("writing outputs")?;
    let report = TrainReport {
        family: cfg.arch.family(),
        train: training::evaluate(&model, &split.train).stage("evaluating")?,
        val: training::evaluate(&model, &split.val).stage("evaluating")?,
        test: training::evaluate(&model, &split.test).stage("evaluating")?,
    };
    write_json(&a.out.join("eval.json"), &report)?;
    println!(
        "{}: train {:.4}  val {:.4}  test {:.4}",
        report.family, report.train.accuracy, report.val.accuracy, report.test.accuracy
    );
    Ok(())
}

pub fn search(a: SearchArgs) -> Result<(), Failure> {
    let space = match &a.space {
        Some(p) => {
            require_file(p, "loading the search space")?;
            HyperSpace::from_json_file(p).stage("loading the search space")?
        }
        None => HyperSpace::full(),
    };
    let mut families = a.family.clone();
    families.dedup();
    if families.contains(&Family::Nl) {
        return Err(Failure::usage("resolving the search", "nested logit is not searched"));
    }
    let opts = SearchOptions {
        trials: a.trials,
        folds: a.folds,
        parallelism: a.parallel,
        seed: a.seed,
    };
    if a.trials == 0 || a.parallel == 0 || a.folds < 2 {
        return Err(Failure::usage(
            "resolving the search",
            "--trials and --parallel must be positive and --folds at least 2",
        ));
    }

    let mut outputs = vec!["curves.csv".to_string()];
    for f in &families {
        for suffix in ["leaderboard.json", "folds.csv", "summary.csv", "reports.json"] {
            outputs.push(format!("{f}_{suffix}"));
        }
        for r in 1..=a.refit_top.min(a.trials) {
            outputs.push(format!("{f}_top{r}.bin"));
        }
    }
    let config = json!({
        "families": families,
        "space": space,
        "trials": a.trials,
        "folds": a.folds,
        "refit_top": a.refit_top,
    });
    let mut manifest = RunManifest::new("search", a.seed, config);
    for p in [Some(&a.data), Some(&a.schema), a.space.as_ref()].into_iter().flatten() {
        manifest.input(p)?;
    }
    manifest.outputs(&a.out, &outputs);
    manifest.write(&a.out)?;

    let ds = load_data(&a.data, &a.schema)?;
    let split = data::split(&ds, a.seed).stage("splitting data")?;
    let trainval = ChoiceDataset::concat(&[&split.train, &split.val]).stage("splitting data")?;
    let mut boards: Vec<Leaderboard> = Vec::new();
    for &family in &families {
        let board = hpo::random_search(&space, family, &trainval, &split.test, &opts).stage("searching")?;
        let name = |s: &str| a.out.join(format!("{family}_{s}"));
        write_json(&name("leaderboard.json"), &board)?;
        board.write_folds_csv(create(&name("folds.csv"))?).stage("writing outputs")?;
        board.write_summary_csv(create(&name("summary.csv"))?).stage("writing outputs")?;
        let mut reports = Vec::new();
        for h in hpo::hyperparameter_names() {
            for metric in [Metric::Test, Metric::Validation] {
                // hyperparameters the family does not have are skipped
                if let Ok(r) = hpo::hyperparameter_report(&board, h, metric) {
                    reports.push(r);
                }
            }
        }
        write_json(&name("reports.json"), &reports)?;
        let models = hpo::refit_top(&board, &trainval, a.refit_top).stage("refitting top models")?;
        for (r, m) in models.iter().enumerate() {
            save_model(m, name(&format!("top{}.bin", r + 1))).stage("writing outputs")?;
        }
        println!(
            "{family}: best cv {:.4}  top-10 mean test {:.4}",
            board.best().map(|t| t.mean_cv_accuracy).unwrap_or(0.0),
            board.top_mean_test_accuracy(10)
        );
        boards.push(board);
    }
    let refs: Vec<&Leaderboard> = boards.iter().collect();
    hpo::write_curves_csv(&refs, create(&a.out.join("curves.csv"))?).stage("writing outputs")?;
    Ok(())
}

fn parse_sweep(spec: &str) -> Result<(String, String, Vec<f64>), Failure> {
    let usage = || Failure::usage("parsing --sweep", format!("expected alt:attr:lo:hi:steps, got `{spec}`"));
    let parts: Vec<&str> = spec.split(':').collect();
    let [alt, attr, lo, hi, steps] = parts[..] else {
        return Err(usage());
    };
    let lo: f64 = lo.parse().map_err(|_| usage())?;
    let hi: f64 = hi.parse().map_err(|_| usage())?;
    let steps: usize = steps.parse().map_err(|_| usage())?;
    if steps == 0 {
        return Err(Failure::usage("parsing --sweep", "the sweep needs at least one step"));
    }
    Ok((alt.to_string(), attr.to_string(), interpret::linspace(lo, hi, steps)))
}

pub fn interpret(a: InterpretArgs) -> Result<(), Failure> {
    let sweep = a.sweep.as_deref().map(parse_sweep).transpose()?;
    let n = a.model.len();
    let tag = |base: &str, i: usize, ext: &str| {
        if n == 1 {
            format!("{base}.{ext}")
        } else {
            format!("{base}_{}.{ext}", i + 1)
        }
    };
    let mut outputs = Vec::new();
    for i in 0..n {
        if sweep.is_some() {
            outputs.push(tag("sweep", i, "csv"));
            outputs.push(tag("sweep", i, "json"));
        }
        if a.elasticity {
            outputs.push(tag("elasticity", i, "csv"));
            outputs.push(tag("elasticity", i, "json"));
        }
        if a.iia {
            outputs.push(tag("iia", i, "json"));
        }
    }
    if a.elasticity && n > 1 {
        outputs.push("elasticity_mean.csv".into());
        outputs.push("elasticity_mean.json".into());
    }
    let config = json!({
        "sweep": a.sweep,
        "elasticity": a.elasticity,
        "iia": a.iia,
        "perturbation": a.perturbation,
        "probes": a.probes,
        "split_seed": a.split_seed,
    });
    let mut manifest = RunManifest::new("interpret", a.seed, config);
    for p in a.model.iter().chain([&a.data, &a.schema]) {
        require_file(p, "hashing inputs")?;
        manifest.input(p)?;
    }
    manifest.outputs(&a.out, &outputs);
    manifest.write(&a.out)?;

    let models: Vec<TrainedModel> = a
        .model
        .iter()
        .map(|p| load_model(p).stage("loading model"))
        .collect::<Result<_, _>>()?;
    let ds = load_data(&a.data, &a.schema)?;
    let ds = match a.split_seed {
        Some(s) => data::split(&ds, s).stage("splitting data")?.train,
        None => ds,
    };
    let mut matrices: Vec<ElasticityMatrix> = Vec::new();
    for (i, m) in models.iter().enumerate() {
        if let Some((alt, attr, grid)) = &sweep {
            let r = interpret::probability_sweep(m, &ds, alt, attr, grid).stage("sweeping")?;
            r.write_csv(create(&a.out.join(tag("sweep", i, "csv")))?).stage("writing outputs")?;
            let json = r.to_plot_json().stage("writing outputs")?;
            std::fs::write(a.out.join(tag("sweep", i, "json")), json + "\n")
                .map_err(|e| Failure::data("writing outputs", e.to_string()))?;
        }
        if a.elasticity {
            let e = interpret::elasticity_matrix(m, &ds, a.perturbation).stage("computing elasticities")?;
            e.write_csv(create(&a.out.join(tag("elasticity", i, "csv")))?).stage("writing outputs")?;
            write_json(&a.out.join(tag("elasticity", i, "json")), &e)?;
            matrices.push(e);
        }
        if a.iia {
            let mut rng = RngStream::named(a.seed, "iia");
            let r = interpret::iia_report(m, &ds, a.probes, &mut rng).stage("probing IIA")?;
            println!(
                "{}: max |d log(Pk/Pj)| = {:e}, IIA {}",
                r.model,
                r.max_deviation,
                if r.iia_consistent { "holds" } else { "violated" }
            );
            write_json(&a.out.join(tag("iia", i, "json")), &r)?;
        }
    }
    if matrices.len() > 1 {
        let mean = interpret::average_elasticities(&matrices).stage("averaging elasticities")?;
        mean.write_csv(create(&a.out.join("elasticity_mean.csv"))?).stage("writing outputs")?;
        write_json(&a.out.join("elasticity_mean.json"), &mean)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SynthSummary {
    n: usize,
    alternatives: Vec<String>,
    shares: Vec<f64>,
    bayes_accuracy: f64,
}

pub fn synth(a: SynthArgs) -> Result<(), Failure> {
    require_file(&a.dgp, "loading the DGP")?;
    let spec: DgpSpec = read_json(&a.dgp, "loading the DGP")?;
    spec.validate().stage("loading the DGP")?;
    if a.n == 0 {
        return Err(Failure::usage("resolving the run", "--n must be positive"));
    }
    let outputs = ["data.csv", "schema.json", "dgp.json", "summary.json"].map(String::from);
    let mut manifest = RunManifest::new("synth", a.seed, json!({ "n": a.n }));
    manifest.input(&a.dgp)?;
    manifest.outputs(&a.out, &outputs);
    manifest.write(&a.out)?;

    let ds = synth::generate(&spec, a.n, &mut RngStream::named(a.seed, "synth")).stage("generating")?;
    data::write_csv(&ds, create(&a.out.join("data.csv"))?).stage("writing outputs")?;
    write_json(&a.out.join("schema.json"), &Schema::for_dataset(&ds))?;
    write_json(&a.out.join("dgp.json"), &spec)?;
    let summary = SynthSummary {
        n: ds.len(),
        alternatives: ds.alternatives.clone(),
        shares: ds.shares(),
        bayes_accuracy: synth::bayes_accuracy(&spec, &ds).stage("generating")?,
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    println!("{} observations, Bayes accuracy {:.4}", summary.n, summary.bayes_accuracy);
    Ok(())
}
