use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use fishnet::analysis::{analyze, to_dot, verify_direct_bp_numerical, WitnessCheck};
use fishnet::checkpoint::Checkpoint;
use fishnet::data::{generate_synthetic, Dataset, SyntheticSpec};
use fishnet::fishnet::{count_flops, count_params, layer_table};
use fishnet::train::{evaluate, EpochMetrics, TrainRecipe};
use fishnet::{Error, FishNetConfig, Model, NodeId};

use crate::table::Table;
use crate::{Format, RecipeArgs};

/// Write to stdout; a reader that went away (`| head`) ends the process
/// quietly instead of panicking.
fn out(text: &str) {
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
    }
}

pub enum Failure {
    Check(String),
    Invalid(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Invalid(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Check(m) | Failure::Invalid(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::ConfigSyntax { .. } | Error::Format(_) | Error::Io(_) => {
                Failure::Invalid(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn read_config(path: &Path) -> Result<FishNetConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    FishNetConfig::parse(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn read_dataset(path: &Path) -> Result<Dataset, Failure> {
    Dataset::load(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    fs::write(path, bytes).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn model(config: &FishNetConfig) -> Result<Model<f32>, Failure> {
    Ok(fishnet::build::<f32>(config, 2, 0)?)
}

fn layer_rows(m: &Model<f32>, format: Format) -> String {
    let mut t = Table::new(&[
        ("id", true),
        ("name", false),
        ("kind", false),
        ("region", false),
        ("stage", true),
        ("shape", false),
        ("params", true),
        ("flops", true),
    ]);
    for r in layer_table(&m.graph) {
        t.push(vec![
            r.id.to_string(),
            r.name,
            r.kind.to_string(),
            r.region.to_string(),
            r.stage.map_or("-".into(), |s| s.to_string()),
            r.shape,
            r.params.to_string(),
            r.flops.to_string(),
        ]);
    }
    let (p, f) = (count_params(&m.graph), count_flops(&m.graph));
    t.push(vec![
        "".into(),
        "total".into(),
        "".into(),
        "".into(),
        "".into(),
        "".into(),
        p.to_string(),
        f.to_string(),
    ]);
    t.render(format)
}

pub fn build(config: &Path, format: Format) -> Outcome {
    let cfg = read_config(config)?;
    out(&layer_rows(&model(&cfg)?, format));
    Ok(())
}

pub fn params(config: &Path, format: Format) -> Outcome {
    let n = count_params(&model(&read_config(config)?)?.graph);
    match format {
        Format::Text => out(&format!("{n}\n")),
        Format::Tsv => out(&format!("params\t{n}\n")),
    }
    Ok(())
}

pub fn flops(config: &Path, input: Option<[usize; 3]>, format: Format) -> Outcome {
    let mut cfg = read_config(config)?;
    if let Some(shape) = input {
        cfg.input_shape = shape;
    }
    let n = count_flops(&model(&cfg)?.graph);
    match format {
        Format::Text => out(&format!("{n}\n")),
        Format::Tsv => out(&format!("flops\t{n}\n")),
    }
    Ok(())
}

/// Stage features with their short names (`tail0`, `body1`, ...).
fn stage_features(m: &Model<f32>) -> Vec<(String, NodeId)> {
    let parts = [("tail", &m.stages.tail), ("body", &m.stages.body), ("head", &m.stages.head)];
    parts
        .iter()
        .flat_map(|(part, ids)| ids.iter().enumerate().map(move |(s, &id)| (format!("{part}{s}"), id)))
        .collect()
}

pub fn bpcheck(config: &Path, dot: Option<&Path>, require: &[String], witness: bool, seed: u64, format: Format) -> Outcome {
    let cfg = read_config(config)?;
    let m = model(&cfg)?;
    let g = &m.graph;
    let report = analyze(g, m.loss)?;
    let features = stage_features(&m);

    let mut required = vec![false; features.len()];
    if require.is_empty() {
        required.iter_mut().for_each(|r| *r = true);
    }
    for want in require.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        let hit = features.iter().position(|(role, id)| role == want || g.node(*id).name() == want);
        match hit {
            Some(i) => required[i] = true,
            None => {
                let roles: Vec<&str> = features.iter().map(|f| f.0.as_str()).collect();
                return Err(Failure::Invalid(format!(
                    "--require: `{want}` is not a stage feature (known: {})",
                    roles.join(", ")
                )));
            }
        }
    }

    let mut t = Table::new(&[
        ("id", true),
        ("name", false),
        ("role", false),
        ("verdict", false),
        ("witness", true),
        ("check", false),
        ("required", false),
    ]);
    let hops = |id: NodeId| report.witness(id).map_or("-".to_string(), |p| (p.len() - 1).to_string());
    let mut failed = Vec::new();
    for ((role, id), &req) in features.iter().zip(&required) {
        let check = match (report.is_direct(*id), witness) {
            (false, _) => "-".to_string(),
            (true, false) => "skipped".to_string(),
            (true, true) => match verify_direct_bp_numerical(g, &report, *id, seed)? {
                WitnessCheck::Agree { .. } => "agree".to_string(),
                WitnessCheck::Disagree { max_rel_err } => format!("DISAGREE({max_rel_err:.1e})"),
                WitnessCheck::NotApplicable(_) => "n/a".to_string(),
            },
        };
        let ok = report.is_direct(*id) && !check.starts_with("DISAGREE");
        if req && !ok {
            failed.push(format!("{role} (`{}`)", g.node(*id).name()));
        }
        t.push(vec![
            id.0.to_string(),
            g.node(*id).name().to_string(),
            role.clone(),
            report.verdict(*id).as_str().to_string(),
            hops(*id),
            check,
            if req { "yes" } else { "no" }.to_string(),
        ]);
    }
    for c in &report.iconvs {
        t.push(vec![
            c.node.0.to_string(),
            g.node(c.node).name().to_string(),
            format!("iconv:{}", c.kind.as_str()),
            report.verdict(c.node).as_str().to_string(),
            hops(c.node),
            "-".to_string(),
            "no".to_string(),
        ]);
    }
    out(&t.render(format));

    if let Some(path) = dot {
        write_file(path, to_dot(g, Some(&report)).as_bytes())?;
    }
    let iconvs: Vec<String> = report
        .iconvs
        .iter()
        .map(|c| format!("`{}` ({})", g.node(c.node).name(), c.kind.as_str()))
        .collect();
    if format == Format::Text {
        let n_req = required.iter().filter(|&&r| r).count();
        out(&format!(
            "{} of {n_req} required features direct; isolated convolutions: {}\n",
            n_req - failed.len(),
            if iconvs.is_empty() { "none".to_string() } else { iconvs.join(", ") }
        ));
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "no direct gradient path for {}; isolated convolutions: {}",
            failed.join(", "),
            if iconvs.is_empty() { "none".to_string() } else { iconvs.join(", ") }
        )))
    }
}

pub fn gen(spec: &str, output: &Path) -> Outcome {
    let spec: SyntheticSpec = spec.parse()?;
    let d = generate_synthetic(&spec);
    write_file(output, &d.to_bytes()?)?;
    let [c, h, w] = d.shape;
    out(&format!(
        "wrote {} examples of {c}x{h}x{w} in {} classes to {}\n",
        d.len(),
        d.num_classes,
        output.display()
    ));
    Ok(())
}

fn recipe(args: &RecipeArgs) -> TrainRecipe {
    let base = if args.paper_recipe { TrainRecipe::paper() } else { TrainRecipe::default() };
    TrainRecipe {
        lr: args.lr.unwrap_or(base.lr),
        step_epochs: args.step_epochs.unwrap_or(base.step_epochs),
        factor: args.lr_factor.unwrap_or(base.factor),
        momentum: args.momentum.unwrap_or(base.momentum),
        weight_decay: args.weight_decay.unwrap_or(base.weight_decay),
        epochs: args.epochs.unwrap_or(base.epochs),
        batch_size: args.batch_size.unwrap_or(base.batch_size),
        flip: args.flip || base.flip,
        crop_pad: args.crop_pad.unwrap_or(base.crop_pad),
        seed: args.seed.unwrap_or(base.seed),
        warmup_epochs: args.warmup_epochs.unwrap_or(base.warmup_epochs),
        clip_norm: args.clip_norm.or(base.clip_norm),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    config: &Path,
    data: &Path,
    output: &Path,
    args: &RecipeArgs,
    metrics: Option<&Path>,
    eval_data: Option<&Path>,
    save_momentum: bool,
    format: Format,
) -> Outcome {
    let cfg = read_config(config)?;
    let d = read_dataset(data)?;
    let held_out = eval_data.map(read_dataset).transpose()?;
    let r = recipe(args);
    r.validate()?;
    let mut log = match metrics {
        Some(p) => Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Failure::Runtime(format!("cannot open {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let mut emit = |line: &str| {
        // training goes on if stdout closes; the checkpoint matters more
        let _ = writeln!(std::io::stdout().lock(), "{line}");
        if let Some(f) = log.as_mut() {
            // a full disk should not abort a long run; the stdout copy remains
            let _ = writeln!(f, "{line}");
        }
    };
    emit(EpochMetrics::TSV_HEADER);
    let mut outcome = fishnet::train::train(&cfg, &d, &r, |m| emit(&m.to_string()))?;
    write_file(output, &outcome.checkpoint(save_momentum).to_bytes())?;
    eprintln!("saved checkpoint to {}", output.display());
    if let Some(test) = held_out {
        let e = evaluate(&mut outcome.model, &outcome.norm, &test, r.batch_size)?;
        print_eval(e.acc, e.loss, test.len(), format);
    }
    Ok(())
}

fn print_eval(acc: f64, loss: f64, n: usize, format: Format) {
    match format {
        Format::Text => out(&format!("top-1 accuracy {acc:.4}, loss {loss:.6} over {n} examples\n")),
        Format::Tsv => out(&format!("examples\tacc\tloss\n{n}\t{acc:.4}\t{loss:.6}\n")),
    }
}

pub fn eval(checkpoint: &Path, data: &Path, batch_size: usize, format: Format) -> Outcome {
    let ck = Checkpoint::load(checkpoint).map_err(|e| Failure::Invalid(format!("{}: {e}", checkpoint.display())))?;
    let d = read_dataset(data)?;
    let mut model = ck.to_model(batch_size.max(1))?;
    let e = evaluate(&mut model, &ck.normalization()?, &d, batch_size)?;
    print_eval(e.acc, e.loss, d.len(), format);
    Ok(())
}

pub fn export_dot(config: &Path, output: Option<&Path>) -> Outcome {
    let m = model(&read_config(config)?)?;
    let report = analyze(&m.graph, m.loss)?;
    let text = to_dot(&m.graph, Some(&report));
    match output {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            out(&text);
            Ok(())
        }
    }
}
