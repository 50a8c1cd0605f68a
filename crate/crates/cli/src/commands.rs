//! The subcommands. Each one writes only inside its output directory and
//! refuses to replace existing files unless `overwrite` is set.

use std::fs;
use std::path::{Path, PathBuf};

use cdcgen::audit::{run_audit, AuditRow};
use cdcgen::condsynth::synthesize as synthesize_class;
use cdcgen::data::{write_pgm_batch, write_points_csv, Domain, IdxFile};
use cdcgen::diffmath::Tensor;
use cdcgen::eval::{
    alignment_probe, bits_per_dim, cycle_audit, latent_projection, oracle_probe, silhouette,
    write_projection_csv, EvalReport,
};
use cdcgen::flow::{
    dequantize_with_noise, quantize, translate as translate_flows, FlowModel, LOGIT_ALPHA,
};
use cdcgen::trainer::{
    load_flows, train_alignment, train_conditional, AlignArch, Checkpoint, CondTrainer, Phase,
};
use cdcgen::{Error, Result};
use serde::Serialize;

use crate::config::{DataSpec, IdxSpec, PointsSpec, RunConfig};
use crate::domains::{write_eval_labels, Domains};

pub const ALIGN_CKPT: &str = "align.ckpt";
pub const COND_CKPT: &str = "cond.ckpt";
pub const ALIGN_METRICS: &str = "metrics_align.csv";
pub const COND_METRICS: &str = "metrics_cond.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// Images written as PGM previews next to translated or synthesized sets.
const PREVIEWS: usize = 16;

/// Samples per no-grad pass when encoding a whole dataset.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    SourceToTarget,
    TargetToSource,
}

impl std::str::FromStr for Direction {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "s2t" => Ok(Direction::SourceToTarget),
            "t2s" => Ok(Direction::TargetToSource),
            _ => Err(format!("expected s2t or t2s, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Align,
    Cond,
    All,
}

impl Suite {
    fn name(self) -> &'static str {
        match self {
            Suite::Align => "align",
            Suite::Cond => "cond",
            Suite::All => "all",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "align" => Ok(Suite::Align),
            "cond" => Ok(Suite::Cond),
            "all" => Ok(Suite::All),
            _ => Err(format!("expected align, cond or all, got `{s}`")),
        }
    }
}

fn claim(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() {
        if !overwrite {
            return Err(Error::Invalid(format!(
                "{} already exists; pass --overwrite to replace it",
                path.display()
            )));
        }
        if path.is_file() {
            fs::remove_file(path).map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

fn make_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the resolved config into the run directory, or checks that the
/// one already there is identical.
fn record_config(cfg: &RunConfig, dir: &Path, overwrite: bool) -> Result<()> {
    let path = dir.join(CONFIG_FILE);
    let text = cfg.to_toml()?;
    if path.exists() && !overwrite {
        let old = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if old != text {
            return Err(Error::Invalid(format!(
                "{} holds a different config; pass --overwrite or pick another name",
                path.display()
            )));
        }
        return Ok(());
    }
    write(&path, text)
}

fn checkpoint_arch(ck: &Checkpoint, cfg: &RunConfig) -> Result<AlignArch> {
    let (_, _, arch) = load_flows(ck)?;
    if &arch != cfg.align_arch() {
        return Err(Error::Config(
            "checkpoint flows were built from a different [arch] than the config".into(),
        ));
    }
    Ok(arch)
}

/// Materializes a synthetic domain pair and its eval sidecar. Returns the
/// data directory, which also receives `data.toml`: a `[data]` section
/// that reads the written files back.
pub fn gen_data(cfg: &RunConfig, out: Option<&Path>, overwrite: bool) -> Result<PathBuf> {
    let dir = out.map_or_else(|| cfg.run_dir().join("data"), Path::to_path_buf);
    let domains = Domains::load(&cfg.data)?;
    let eval = domains
        .target_eval
        .as_ref()
        .expect("generated pairs carry eval labels");
    let k = domains.source.classes();
    let spec = match &cfg.data {
        DataSpec::Pinwheel(_) => {
            let files = ["source.csv", "target.csv", "target_eval_labels.csv"];
            for f in files {
                claim(&dir.join(f), overwrite)?;
            }
            make_dir(&dir)?;
            write_points_csv(
                &dir.join(files[0]),
                domains.source.samples(),
                domains.source.labels(),
            )?;
            write_points_csv(&dir.join(files[1]), domains.target.samples(), None)?;
            write_eval_labels(&dir.join(files[2]), &eval.labels)?;
            DataSpec::Points(PointsSpec {
                source: files[0].into(),
                target: files[1].into(),
                target_eval_labels: Some(files[2].into()),
                classes: k,
            })
        }
        DataSpec::Digits(_) => {
            let files = [
                "source-images.idx",
                "source-labels.idx",
                "target-images.idx",
                "target-eval-labels.idx",
            ];
            for f in files {
                claim(&dir.join(f), overwrite)?;
            }
            make_dir(&dir)?;
            IdxFile::from_images(domains.source.samples())?.write(&dir.join(files[0]))?;
            IdxFile::from_labels(domains.source.labels().expect("labeled source"))
                .write(&dir.join(files[1]))?;
            IdxFile::from_images(domains.target.samples())?.write(&dir.join(files[2]))?;
            IdxFile::from_labels(&eval.labels).write(&dir.join(files[3]))?;
            DataSpec::Idx(IdxSpec {
                source_images: files[0].into(),
                source_labels: files[1].into(),
                target_images: files[2].into(),
                target_labels: None,
                target_eval_labels: Some(files[3].into()),
                classes: k,
                resize: Some(domains.source.item_shape()[1]),
                per_class: None,
                seed: 0,
            })
        }
        _ => {
            return Err(Error::Config(
                "gen-data needs a generated data kind (pinwheel or digits)".into(),
            ))
        }
    };
    #[derive(Serialize)]
    struct Section<'a> {
        data: &'a DataSpec,
    }
    let snippet = dir.join("data.toml");
    claim(&snippet, overwrite)?;
    write(
        &snippet,
        toml::to_string(&Section { data: &spec }).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    Ok(dir)
}

/// Phase 1. Returns the path of the alignment checkpoint.
pub fn train_align(cfg: &RunConfig, overwrite: bool) -> Result<PathBuf> {
    let dir = cfg.run_dir();
    let ckpt = dir.join(ALIGN_CKPT);
    claim(&ckpt, overwrite)?;
    claim(&dir.join(ALIGN_METRICS), overwrite)?;
    let domains = Domains::load(&cfg.data)?;
    domains.target.ensure_trainable()?;
    make_dir(&dir)?;
    record_config(cfg, &dir, overwrite)?;
    train_alignment(
        cfg.align_arch().clone(),
        cfg.align.clone(),
        &domains.source,
        &domains.target,
        Some(&dir),
    )?;
    Ok(ckpt)
}

/// Phase 2 on top of the flows in `from`. Returns the conditional
/// checkpoint path.
pub fn train_cond(cfg: &RunConfig, from: &Path, overwrite: bool) -> Result<PathBuf> {
    let ck = Checkpoint::load(from)?;
    if ck.phase != Phase::Align {
        return Err(Error::Checkpoint(format!(
            "{} is not an alignment checkpoint",
            from.display()
        )));
    }
    checkpoint_arch(&ck, cfg)?;
    let domains = Domains::load(&cfg.data)?;
    domains.target.ensure_trainable()?;
    let dir = cfg.run_dir();
    let ckpt = dir.join(COND_CKPT);
    claim(&ckpt, overwrite)?;
    claim(&dir.join(COND_METRICS), overwrite)?;
    make_dir(&dir)?;
    record_config(cfg, &dir, overwrite)?;
    train_conditional(
        &ck,
        cfg.cond_arch().clone(),
        cfg.cond.clone(),
        &domains.source,
        Some(&domains.target),
        Some(&dir),
    )?;
    Ok(ckpt)
}

/// Pixels to flow inputs with the dequantization noise fixed at the bin
/// centre, so repeated calls agree.
fn to_flow_input(x: &Tensor, dequant: bool) -> Result<Tensor> {
    if !dequant {
        return Ok(x.clone());
    }
    let half = Tensor::full(x.shape().to_vec(), 0.5);
    Ok(dequantize_with_noise(x, &half, LOGIT_ALPHA)?.y)
}

fn check_input(flow: &FlowModel, x: &Tensor) -> Result<()> {
    if x.shape()[1..] != flow.input_shape()[..] {
        return Err(Error::ShapeMismatch {
            op: "input samples",
            left: x.shape()[1..].to_vec(),
            right: flow.input_shape(),
        });
    }
    Ok(())
}

/// Writes samples as `<stem>.csv` for points, or as IDX plus PGM
/// previews for images. Returns the main file.
fn write_samples(
    out: &Path,
    stem: &str,
    x: &Tensor,
    labels: Option<&[usize]>,
    overwrite: bool,
) -> Result<PathBuf> {
    if x.rank() == 2 {
        let path = out.join(format!("{stem}.csv"));
        claim(&path, overwrite)?;
        make_dir(out)?;
        write_points_csv(&path, x, labels)?;
        return Ok(path);
    }
    let path = out.join(format!("{stem}-images.idx"));
    let label_path = out.join(format!("{stem}-labels.idx"));
    let previews = out.join(format!("{stem}-preview"));
    claim(&path, overwrite)?;
    claim(&label_path, overwrite)?;
    claim(&previews, overwrite)?;
    make_dir(out)?;
    IdxFile::from_images(x)?.write(&path)?;
    if let Some(l) = labels {
        IdxFile::from_labels(l).write(&label_path)?;
    }
    let first: Vec<usize> = (0..x.batch().min(PREVIEWS)).collect();
    write_pgm_batch(&previews, stem, &x.select(&first))?;
    Ok(path)
}

/// Moves samples from `--in` across domains with `F_t⁻¹∘F_s` or its
/// reverse.
pub fn translate(
    from: &Path,
    direction: Direction,
    input: &Path,
    out: &Path,
    overwrite: bool,
) -> Result<PathBuf> {
    let ck = Checkpoint::load(from)?;
    let (fs_, ft, arch) = load_flows(&ck)?;
    let (src, dst) = match direction {
        Direction::SourceToTarget => (&fs_, &ft),
        Direction::TargetToSource => (&ft, &fs_),
    };
    let x = crate::domains::read_samples(input)?;
    check_input(src, &x)?;
    let y = translate_flows(src, dst, &to_flow_input(&x, arch.dequantize)?)?;
    let y = if arch.dequantize {
        quantize(&y, LOGIT_ALPHA)
    } else {
        y
    };
    write_samples(out, "translated", &y, None, overwrite)
}

/// `n` target-domain samples of class `class`.
pub fn synthesize(
    from: &Path,
    class: usize,
    n: usize,
    seed: u64,
    out: &Path,
    overwrite: bool,
) -> Result<PathBuf> {
    let ck = Checkpoint::load(from)?;
    if ck.phase != Phase::Cond {
        return Err(Error::Checkpoint(format!(
            "{} is not a conditional checkpoint",
            from.display()
        )));
    }
    if n == 0 {
        return Err(Error::Invalid("--n must be at least 1".into()));
    }
    let tr = CondTrainer::from_checkpoint(&ck)?;
    let x = synthesize_class(&tr.encoder, &tr.flow_t, class, n, seed)?;
    let x = if tr.arch.dequantize {
        quantize(&x, LOGIT_ALPHA)
    } else {
        x
    };
    write_samples(out, "samples", &x, Some(&vec![class; n]), overwrite)
}

/// Evenly strided indices, at most `cap` of them.
fn spread(n: usize, cap: usize) -> Vec<usize> {
    let m = n.min(cap);
    (0..m).map(|i| i * n / m).collect()
}

fn latents(flow: &FlowModel, x: &Tensor, dequant: bool) -> Result<Tensor> {
    Ok(flow.encode(&to_flow_input(x, dequant)?)?.z)
}

fn align_suite(
    report: &mut EvalReport,
    cfg: &RunConfig,
    ck: &Checkpoint,
    d: &Domains,
    out: &Path,
) -> Result<()> {
    let (fs_, ft, arch) = load_flows(ck)?;
    let e = &cfg.eval;
    let (xs, xt) = (d.source.samples(), d.target.samples());
    let n = e.cycle_samples.min(xs.batch()).min(xt.batch());
    let cyc = cycle_audit(
        &fs_,
        &ft,
        &to_flow_input(xs, arch.dequantize)?,
        &to_flow_input(xt, arch.dequantize)?,
        n,
    )?;
    report.insert("cycle_max_error_source", cyc.source.max)?;
    report.insert("cycle_max_error_target", cyc.target.max)?;
    report.insert(
        "bits_per_dim_source",
        bits_per_dim(&fs_, xs, arch.dequantize, e.seed)?,
    )?;
    report.insert(
        "bits_per_dim_target",
        bits_per_dim(&ft, xt, arch.dequantize, e.seed)?,
    )?;

    let is = spread(xs.batch(), e.max_points);
    let it = spread(xt.batch(), e.max_points);
    let zs = latents(&fs_, &xs.select(&is), arch.dequantize)?;
    let zt = latents(&ft, &xt.select(&it), arch.dequantize)?;
    report.insert(
        "alignment_probe_accuracy",
        alignment_probe(&zs, &zt, &e.probe)?,
    )?;

    let ls: Vec<usize> = {
        let l = d.source.labels().expect("labeled source");
        is.iter().map(|&i| l[i]).collect()
    };
    report.insert("silhouette_source", silhouette(&zs, &ls)?)?;
    let pooled = Tensor::concat_batch(&[&zs, &zt])?;
    let lt: Option<Vec<usize>> = d
        .target_eval
        .as_ref()
        .map(|t| it.iter().map(|&i| t.labels[i]).collect());
    if let Some(lt) = &lt {
        let all: Vec<usize> = ls.iter().chain(lt).copied().collect();
        report.insert("silhouette_pooled", silhouette(&pooled, &all)?)?;
    }
    let proj = latent_projection(&pooled)?;
    let classes: Vec<Option<usize>> = ls
        .iter()
        .map(|&l| Some(l))
        .chain((0..it.len()).map(|j| lt.as_ref().map(|l| l[j])))
        .collect();
    let domains: Vec<Domain> = std::iter::repeat_n(Domain::Source, is.len())
        .chain(std::iter::repeat_n(Domain::Target, it.len()))
        .collect();
    write_projection_csv(&out.join("projection.csv"), &proj, &classes, &domains)?;
    let shape = fs_.input_shape();
    if shape.len() == 3 && shape[0] == 1 {
        let dir = out.join("latents");
        make_dir(&dir)?;
        for (prefix, z) in [("source", &zs), ("target", &zt)] {
            write_pgm_batch(&dir, prefix, &latent_images(z, &shape)?)?;
        }
    }
    Ok(())
}

/// Flat latents laid out on the input grid in flattening order, ±3σ
/// mapped onto the pixel range.
fn latent_images(z: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let n = z.batch().min(PREVIEWS);
    let img = z
        .select(&(0..n).collect::<Vec<_>>())
        .map(|v| (127.5 + 42.5 * v).round().clamp(0.0, 255.0));
    img.reshape(vec![n, shape[0], shape[1], shape[2]])
}

fn cond_suite(
    report: &mut EvalReport,
    cfg: &RunConfig,
    ck: &Checkpoint,
    d: &Domains,
) -> Result<()> {
    if ck.phase != Phase::Cond {
        return Err(Error::Checkpoint(
            "the cond suite needs a conditional checkpoint".into(),
        ));
    }
    let eval = d
        .target_eval
        .as_ref()
        .ok_or_else(|| Error::Config("the cond suite needs target eval labels in [data]".into()))?;
    let tr = CondTrainer::from_checkpoint(ck)?;
    let e = &cfg.eval;
    let k = tr.encoder.classes();
    let pixels = |x: Tensor| {
        if tr.arch.dequantize {
            quantize(&x, LOGIT_ALPHA)
        } else {
            x
        }
    };
    let mut parts = Vec::with_capacity(k);
    let mut conds = Vec::with_capacity(k * e.samples_per_class);
    for c in 0..k {
        let x = synthesize_class(
            &tr.encoder,
            &tr.flow_t,
            c,
            e.samples_per_class,
            e.seed.wrapping_add(c as u64),
        )?;
        parts.push(pixels(x));
        conds.extend(std::iter::repeat_n(c, e.samples_per_class));
    }
    let synth = Tensor::concat_batch(&parts.iter().collect::<Vec<_>>())?;
    let xt = d.target.samples();
    let oracle = oracle_probe(xt, &eval.labels, k, &synth, &conds, &e.probe)?;
    report.insert("oracle_probe_accuracy", oracle.probe_accuracy)?;
    report.insert("oracle_valid", f64::from(u8::from(oracle.valid)))?;
    report.insert("cond_oracle_accuracy", oracle.accuracy)?;
    report.insert("cond_oracle_accuracy_relabeled", oracle.relabeled_accuracy)?;

    let is = spread(d.source.len(), e.max_points);
    let xs = d.source.samples().select(&is);
    let ls: Vec<usize> = {
        let l = d.source.labels().expect("labeled source");
        is.iter().map(|&i| l[i]).collect()
    };
    let moved = pixels(translate_flows(
        &tr.flow_s,
        &tr.flow_t,
        &to_flow_input(&xs, tr.arch.dequantize)?,
    )?);
    let graded = oracle_probe(xt, &eval.labels, k, &moved, &ls, &e.probe)?;
    report.insert("translation_oracle_accuracy", graded.accuracy)?;
    report.insert(
        "translation_oracle_accuracy_relabeled",
        graded.relabeled_accuracy,
    )?;
    Ok(())
}

/// Runs an evaluation suite against a checkpoint. The config defaults to
/// the one stored next to the checkpoint; results go to
/// `<checkpoint dir>/eval_<suite>` unless `out` is given.
pub fn eval(
    from: &Path,
    suite: Suite,
    config: Option<&Path>,
    out: Option<&Path>,
    overwrite: bool,
) -> Result<(EvalReport, PathBuf)> {
    let ck = Checkpoint::load(from)?;
    let run_dir = from.parent().unwrap_or(Path::new("."));
    let cfg_path = config.map_or_else(|| run_dir.join(CONFIG_FILE), Path::to_path_buf);
    let cfg = RunConfig::load(&cfg_path)?;
    checkpoint_arch(&ck, &cfg)?;
    let out = out.map_or_else(
        || run_dir.join(format!("eval_{}", suite.name())),
        Path::to_path_buf,
    );
    for f in ["eval.csv", "eval.txt", "projection.csv"] {
        claim(&out.join(f), overwrite)?;
    }
    let domains = Domains::load(&cfg.data)?;
    let mut report = EvalReport::new(from.display().to_string(), cfg.to_toml()?);
    report.insert("step", ck.step as f64)?;
    make_dir(&out)?;
    if matches!(suite, Suite::Align | Suite::All) {
        align_suite(&mut report, &cfg, &ck, &domains, &out)?;
    }
    if matches!(suite, Suite::Cond | Suite::All) {
        cond_suite(&mut report, &cfg, &ck, &domains)?;
    }
    report.save(&out)?;
    Ok((report, out))
}

/// Finite-difference audit of every registered primitive and loss.
pub fn grad_check(seeds: u64) -> Result<Vec<AuditRow>> {
    if seeds == 0 {
        return Err(Error::Invalid("--seeds must be at least 1".into()));
    }
    run_audit(seeds)
}
