//! The `tvsr` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{Arg, ArgMatches, Command};
use tvsr_core::experiment::{domain_gap_experiment, ExperimentConfig, TrainMode};
use tvsr_core::metrics::{evaluate_case, slice_pair_analysis, MetricReport};
use tvsr_core::model::{TvsrnConfig, TvsrnParams};
use tvsr_core::train::Trainer;
use tvsr_core::volume::{Unit, Volume};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{parse_tuple3, Key, Settings, Source, COMMON_KEYS, MODEL_KEYS, PHANTOM_KEYS, TRAIN_KEYS};
use crate::container::{read_volume, write_volume};
use crate::dataset::{default_split, make_dataset, read_manifest, ThickMode, MANIFEST};
use crate::error::{write_file, Error, Result};
use crate::infer::infer_file_volume;
use crate::nifti::read_nifti1;
use crate::pgm::{export_slice_pgm, parse_axis};
use crate::report::{emit_report, loss_csv, read_report_json, slice_pairs_json, slice_pairs_text};

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

const GEN_KEYS: &[Key] = &[
    key("n", "10", "number of cases"),
    key("out", "", "output directory"),
    key("split", "auto", "train,val,test counts; auto gives a fifth each to val and test"),
    key("scale", "5", "thin slices per thick slice"),
    key("thick", "real", "thick series: real (simulated acquisition) or pseudo (decimated)"),
];

const TRAIN_IO_KEYS: &[Key] = &[
    key("data", "", "dataset manifest"),
    key("out", "", "directory for checkpoints and loss.csv"),
    key("split", "train", "manifest split to train on"),
    key("resume", "", "training checkpoint to continue from"),
];

const INFER_KEYS: &[Key] = &[
    key("weights", "", "model checkpoint"),
    key("input", "", "thick volume (.tvsr or .nii), or a directory of .tvsr files"),
    key("output", "", "thin volume path, or a directory when input is one"),
    key("tile", "", "window D,H,W; defaults to the model depth and up to 64x64 in-plane"),
];

const EVAL_KEYS: &[Key] = &[
    key("pred_dir", "", "directory of predicted volumes"),
    key("truth_dir", "", "directory of reference volumes with matching file names"),
    key("out", "", "report path; .csv and .json are written next to each other"),
    key("method", "model", "method name recorded in the report"),
    key("compare", "", "JSON report of a baseline to test against"),
];

const ANALYZE_KEYS: &[Key] = &[
    key("thin", "", "thin volume"),
    key("thick", "", "thick volume"),
    key("scale", "5", "thin slices per thick slice"),
    key("out", "", "optional JSON output"),
];

const GAP_KEYS: &[Key] = &[
    key("n_train", "8", "training cases"),
    key("n_test", "20", "test cases"),
    key("tile", "32,32", "in-plane inference tile H,W"),
    key("arms", "real_pair,pseudo_pair", "the two training modes to compare"),
    key("out", "", "directory for the two reports"),
];

const EXPORT_KEYS: &[Key] = &[
    key("input", "", "volume (.tvsr or .nii)"),
    key("axis", "axial", "axial, coronal or sagittal"),
    key("index", "0", "slice index along the axis"),
    key("center", "-600", "window center, HU"),
    key("width", "1500", "window width, HU"),
    key("out", "", "PGM output path"),
];

struct Sub {
    name: &'static str,
    about: &'static str,
    groups: &'static [&'static [Key]],
    defaults: &'static [(&'static str, &'static str)],
}

const SUBS: &[Sub] = &[
    Sub {
        name: "gen-data",
        about: "Generate a synthetic thin/thick dataset with a manifest",
        groups: &[COMMON_KEYS, GEN_KEYS, PHANTOM_KEYS],
        defaults: &[],
    },
    Sub {
        name: "train",
        about: "Train a model on the pairs of a manifest",
        groups: &[COMMON_KEYS, MODEL_KEYS, TRAIN_KEYS, TRAIN_IO_KEYS],
        defaults: &[],
    },
    Sub {
        name: "infer",
        about: "Sliding-window inference of thin volumes from thick ones",
        groups: &[COMMON_KEYS, INFER_KEYS],
        defaults: &[],
    },
    Sub {
        name: "eval",
        about: "PSNR/SSIM report of predictions against references",
        groups: &[COMMON_KEYS, EVAL_KEYS],
        defaults: &[],
    },
    Sub {
        name: "analyze",
        about: "Match/near/far slice-pair similarity of a thin/thick pair",
        groups: &[COMMON_KEYS, ANALYZE_KEYS],
        defaults: &[],
    },
    Sub {
        name: "domain-gap",
        about: "Train on real and pseudo pairs and compare on real thick inputs",
        groups: &[COMMON_KEYS, MODEL_KEYS, TRAIN_KEYS, PHANTOM_KEYS, GAP_KEYS],
        defaults: &[
            ("channels", "4"),
            ("n_enc", "2"),
            ("lr", "0.001"),
            ("steps", "300"),
            ("cube", "4,16,16"),
            ("dims", "21,32,32"),
        ],
    },
    Sub {
        name: "count-params",
        about: "Per-block and total parameter counts of a model configuration",
        groups: &[COMMON_KEYS, MODEL_KEYS],
        defaults: &[],
    },
    Sub {
        name: "export-slice",
        about: "Write one windowed slice as a binary PGM",
        groups: &[COMMON_KEYS, EXPORT_KEYS],
        defaults: &[],
    },
];

fn default_of(sub: &Sub, k: &Key) -> &'static str {
    sub.defaults.iter().find(|(n, _)| *n == k.name).map_or(k.default, |(_, v)| v)
}

pub fn command() -> Command {
    let mut cmd = Command::new("tvsr")
        .about("Through-plane super-resolution of thick-slice CT volumes")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for sub in SUBS {
        let mut c = Command::new(sub.name).about(sub.about).arg(
            Arg::new("config").long("config").value_name("FILE").help("key=value settings file; flags take precedence"),
        );
        for g in sub.groups {
            for k in *g {
                let long: &'static str = Box::leak(k.name.replace('_', "-").into_boxed_str());
                let mut a = Arg::new(k.name).long(long).value_name("VALUE").help(k.help);
                let d = default_of(sub, k);
                if !d.is_empty() {
                    a = a.default_value(d);
                }
                c = c.arg(a);
            }
        }
        cmd = cmd.subcommand(c);
    }
    cmd
}

fn settings_for(sub: &Sub, m: &ArgMatches) -> Result<Settings> {
    let mut s = Settings::new(sub.groups);
    for (name, v) in sub.defaults {
        s.set(name, *v, Source::Default)?;
    }
    if let Some(path) = m.get_one::<String>("config") {
        s.load_file(Path::new(path))?;
    }
    for g in sub.groups {
        for k in *g {
            if m.value_source(k.name) == Some(ValueSource::CommandLine) {
                s.set(k.name, m.get_one::<String>(k.name).unwrap().clone(), Source::Flag)?;
            }
        }
    }
    Ok(s)
}

/// Runs the command line and returns the process exit code: 0 success,
/// 1 usage, 2 data or format, 3 numeric failure.
pub fn dispatch<I, T>(argv: I, out: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match run(argv, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run<I, T>(argv: I, out: &mut (dyn Write + Send)) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{}", e.render());
                return Ok(());
            }
            return Err(Error::Usage(e.render().to_string().trim_end().to_string()));
        }
    };
    let (name, m) = matches.subcommand().unwrap();
    let sub = SUBS.iter().find(|s| s.name == name).unwrap();
    let s = settings_for(sub, m)?;
    init_logging(s.str("log_level")?)?;
    let threads: usize = s.get("threads")?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Usage(format!("threads: {e}")))?;
    let _ = writeln!(out, "# {name}\n{}", s.echo());
    pool.install(|| match name {
        "gen-data" => gen_data(&s, out),
        "train" => train(&s, out),
        "infer" => infer(&s, out),
        "eval" => eval(&s, out),
        "analyze" => analyze(&s, out),
        "domain-gap" => domain_gap(&s, out),
        "count-params" => {
            let _ = write!(out, "{}", print_model_summary(&s.model_config()?)?);
            Ok(())
        }
        "export-slice" => export_slice(&s, out),
        _ => unreachable!(),
    })
}

fn init_logging(level: &str) -> Result<()> {
    let filter: log::LevelFilter = level.parse().map_err(|_| Error::Usage(format!("log_level: unknown level {level:?}")))?;
    let _ = env_logger::Builder::new().filter_level(filter).format_timestamp(None).try_init();
    log::set_max_level(filter);
    Ok(())
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

/// Per-block and total parameter counts, variant name and depth law.
pub fn print_model_summary(cfg: &TvsrnConfig) -> Result<String> {
    cfg.validate()?;
    let (params, store) = TvsrnParams::init::<f32>(cfg, 0)?;
    let total = params.count_params_total(&store);
    let mut s = format!(
        "variant: {}\nchannels C={} encoder layers N={} modules M={}\ndepth {} -> {} (scale {})\n",
        cfg.variant.name(),
        cfg.channels,
        cfg.n_enc,
        cfg.m_fim,
        cfg.depth,
        cfg.out_depth(),
        cfg.scale
    );
    s.push_str(&format!("{:<16}{:>12}\n", "block", "params"));
    for (name, n) in cfg.param_summary() {
        s.push_str(&format!("{name:<16}{n:>12}\n"));
    }
    s.push_str(&format!("{:<16}{:>12}\n", "total", total));
    Ok(s)
}

fn read_any_volume(path: &Path) -> Result<Volume> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => read_nifti1(path),
        _ => read_volume(path),
    }
}

fn normalized(v: Volume) -> Result<Volume> {
    Ok(match v.unit() {
        Unit::Hu => v.normalize_hu()?,
        Unit::Normalized => v,
    })
}

fn gen_data(s: &Settings, out: &mut (dyn Write + Send)) -> Result<()> {
    let n: usize = s.get("n")?;
    let counts = match s.str("split")? {
        "auto" => default_split(n),
        other => parse_tuple3(other).ok_or_else(|| usage(format!("split: expected train,val,test, got {other:?}")))?,
    };
    if counts.0 + counts.1 + counts.2 != n {
        return Err(usage(format!("split {counts:?} does not add up to n = {n}")));
    }
    let mode = ThickMode::parse(s.str("thick")?).ok_or_else(|| usage("thick: expected real or pseudo"))?;
    let (spec, acq) = s.phantom()?;
    let dir = PathBuf::from(s.str("out")?);
    let entries = make_dataset(counts, &spec, acq, s.get("scale")?, mode, &dir)?;
    let _ = writeln!(out, "wrote {} cases to {}", entries.len(), dir.join(MANIFEST).display());
    Ok(())
}

fn load_pairs(manifest: &Path, split: &str, scale: usize) -> Result<Vec<(Volume, Volume)>> {
    let entries = read_manifest(manifest)?;
    let mut pairs = Vec::new();
    for e in entries.iter().filter(|e| e.split.name() == split) {
        let thick = normalized(read_any_volume(&e.thick)?)?;
        let thin = normalized(read_any_volume(&e.thin)?)?;
        if (thick.depth() - 1) * scale + 1 != thin.depth() {
            return Err(Error::Data(format!(
                "case {}: thin depth {} is not (thick depth {} - 1) * {scale} + 1",
                e.id,
                thin.depth(),
                thick.depth()
            )));
        }
        pairs.push((thick, thin));
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("{}: no cases in split {split:?}", manifest.display())));
    }
    Ok(pairs)
}

fn train(s: &Settings, out: &mut (dyn Write + Send)) -> Result<()> {
    let dir = PathBuf::from(s.str("out")?);
    let mut trainer = match s.raw("resume") {
        Some(path) => {
            let mut t = load_checkpoint(Path::new(path))?.into_trainer()?;
            if s.is_explicit("steps") {
                t.cfg.steps = s.get("steps")?;
            }
            t
        }
        None => {
            let cfg = s.train_config()?;
            let (params, store) = TvsrnParams::init(&s.model_config()?, cfg.seed)?;
            Trainer::new(params, store, cfg)?
        }
    };
    let pairs = load_pairs(Path::new(s.str("data")?), s.str("split")?, trainer.params.config.scale)?;
    let save = |t: &Trainer| -> tvsr_core::Result<()> {
        let path = if t.state.step == t.cfg.steps { dir.join("model.tvck") } else { dir.join(format!("step_{:06}.tvck", t.state.step)) };
        save_checkpoint(&Checkpoint::from_trainer(t), &path)
            .and_then(|_| write_file(&dir.join("loss.csv"), loss_csv(&t.state.losses, 0).as_bytes()))
            .map_err(|e| tvsr_core::Error::Contract(e.to_string()))?;
        log::info!("checkpoint {}", path.display());
        Ok(())
    };
    let every = (trainer.cfg.steps / 20).max(1);
    trainer.train(&pairs, |step, loss| if step % every == 0 { log::info!("step {step} loss {loss:.6}") }, save)?;
    let _ = writeln!(
        out,
        "trained {} steps, final loss {}",
        trainer.state.step,
        trainer.state.losses.last().map_or(f32::NAN, |&l| l)
    );
    Ok(())
}

fn infer(s: &Settings, out: &mut (dyn Write + Send)) -> Result<()> {
    let ck = load_checkpoint(Path::new(s.str("weights")?))?;
    let tile = match s.raw("tile") {
        Some(t) => Some(parse_tuple3(t).ok_or_else(|| usage(format!("tile: expected D,H,W, got {t:?}")))?),
        None => None,
    };
    let input = PathBuf::from(s.str("input")?);
    let output = PathBuf::from(s.str("output")?);
    let jobs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
        volume_files(&input)?.into_iter().map(|p| (input.join(&p), output.join(&p))).collect()
    } else {
        vec![(input, output)]
    };
    for (src, dst) in jobs {
        let thin = infer_file_volume(&read_any_volume(&src)?, &ck.store, &ck.params, tile)?;
        write_volume(&thin, &dst)?;
        let _ = writeln!(out, "{} -> {} {:?}", src.display(), dst.display(), thin.dims());
    }
    Ok(())
}

/// Sorted `.tvsr` file names in `dir`.
fn volume_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| PathBuf::from(e.file_name()))
        .filter(|p| p.extension().is_some_and(|x| x == "tvsr"))
        .collect();
    names.sort();
    Ok(names)
}

fn eval(s: &Settings, out: &mut (dyn Write + Send)) -> Result<()> {
    let pred_dir = PathBuf::from(s.str("pred_dir")?);
    let truth_dir = PathBuf::from(s.str("truth_dir")?);
    let names = volume_files(&pred_dir)?;
    if names.is_empty() {
        return Err(Error::Data(format!("{}: no .tvsr volumes", pred_dir.display())));
    }
    let mut rows = Vec::new();
    for n in &names {
        let pred = normalized(read_volume(&pred_dir.join(n))?)?;
        let truth = normalized(read_volume(&truth_dir.join(n))?)?;
        let id = n.file_stem().unwrap().to_string_lossy().to_string();
        rows.push(evaluate_case(id, &pred, &truth)?);
    }
    let mut report = MetricReport::new(s.str("method")?, rows);
    if let Some(other) = s.raw("compare") {
        let other = read_report_json(Path::new(other))?;
        let c = report.compare(&other)?;
        let _ = writeln!(out, "{}: n={} p(psnr)={:.5} p(ssim)={:.5}", c.label, c.cases, c.p_psnr, c.p_ssim);
        report.comparisons.push(c);
    }
    let path = PathBuf::from(s.str("out")?);
    emit_report(&report, &path.with_extension("csv"), &path.with_extension("json"))?;
    let _ = writeln!(out, "{}: psnr {} ssim {}", report.method, report.psnr.display(), report.ssim.display());
    Ok(())
}

fn analyze(s: &Settings, out: &mut (dyn Write + Send)) -> Result<()> {
    let thin = normalized(read_any_volume(Path::new(s.str("thin")?))?)?;
    let thick = normalized(read_any_volume(Path::new(s.str("thick")?))?)?;
    let table = slice_pair_analysis(&thin, &thick, s.get("scale")?)?;
    let _ = write!(out, "{}", slice_pairs_text(&table));
    if let Some(path) = s.raw("out") {
        write_file(Path::new(path), slice_pairs_json(&table).as_bytes())?;
    }
    Ok(())
}

fn parse_mode(m: &str) -> Result<TrainMode> {
    match m.trim() {
        "real_pair" => Ok(TrainMode::RealPair),
        "pseudo_pair" => Ok(TrainMode::PseudoPair),
        other => Err(usage(format!("arms: unknown training mode {other:?}"))),
    }
}

fn domain_gap(s: &Settings, out: &mut (dyn Write + Send)) -> Result<()> {
    let arms = s.str("arms")?;
    let (a, b) = arms.split_once(',').ok_or_else(|| usage("arms: expected two comma-separated modes"))?;
    let (phantom, acquisition) = s.phantom()?;
    let cfg = ExperimentConfig {
        phantom,
        acquisition,
        model: s.model_config()?,
        train: s.train_config()?,
        n_train: s.get("n_train")?,
        n_test: s.get("n_test")?,
        tile: s.pair("tile")?,
    };
    let r = domain_gap_experiment(&cfg, (parse_mode(a)?, parse_mode(b)?))?;
    let dir = PathBuf::from(s.str("out")?);
    for rep in [&r.first, &r.second] {
        let base = dir.join(rep.method.replace('#', "_"));
        emit_report(rep, &base.with_extension("csv"), &base.with_extension("json"))?;
        let _ = writeln!(out, "{}: psnr {} ssim {}", rep.method, rep.psnr.display(), rep.ssim.display());
    }
    let c = &r.comparison;
    let _ = writeln!(out, "{}: n={} p(psnr)={:.5} p(ssim)={:.5}", c.label, c.cases, c.p_psnr, c.p_ssim);
    Ok(())
}

fn export_slice(s: &Settings, out: &mut (dyn Write + Send)) -> Result<()> {
    let v = read_any_volume(Path::new(s.str("input")?))?;
    let axis = parse_axis(s.str("axis")?).ok_or_else(|| usage("axis: expected axial, coronal or sagittal"))?;
    let path = PathBuf::from(s.str("out")?);
    export_slice_pgm(&v, axis, s.get("index")?, (s.get("center")?, s.get("width")?), &path)?;
    let _ = writeln!(out, "wrote {}", path.display());
    Ok(())
}
