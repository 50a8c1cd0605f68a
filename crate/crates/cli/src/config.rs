//! Run configuration files.
//!
//! A run file is TOML. Only `name` and `[data]` are required; every other
//! section falls back to defaults chosen from the data kind, and a section
//! that is present only needs the keys it changes. The resolved config
//! (all defaults spelled out, data paths made absolute) is what gets
//! written into the run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cdcgen::adversary::CriticConfig;
use cdcgen::condsynth::{EncoderConfig, LatentCriticConfig, UpStage};
use cdcgen::data::PinwheelConfig;
use cdcgen::eval::ProbeConfig;
use cdcgen::flow::FlowConfig;
use cdcgen::trainer::{AlignArch, AlignConfig, CondArch, CondConfig};
use cdcgen::{Error, Result};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "CDCGEN_OUT_ROOT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

/// Where the samples of both domains come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    /// Generated 2-D pinwheel pair.
    Pinwheel(PinwheelConfig),
    /// Synthetic seven-segment digits. The target domain is rendered at
    /// half resolution and upscaled, which blurs the strokes.
    Digits(DigitsSpec),
    /// 2-D points from CSV files written by `gen-data` or by hand.
    Points(PointsSpec),
    /// IDX image files such as MNIST and USPS.
    Idx(IdxSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DigitsSpec {
    pub size: usize,
    pub per_class: usize,
    pub seed: u64,
}

impl Default for DigitsSpec {
    fn default() -> Self {
        DigitsSpec {
            size: 16,
            per_class: 542,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointsSpec {
    /// `x,y,class` rows.
    pub source: PathBuf,
    /// `x,y,` rows. A class column here is refused at training time.
    pub target: PathBuf,
    /// One `class` per line, aligned with `target`; used by `eval` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_eval_labels: Option<PathBuf>,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSpec {
    pub source_images: PathBuf,
    pub source_labels: PathBuf,
    pub target_images: PathBuf,
    /// Labels loaded into the training set. Set only to check that
    /// training refuses them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_eval_labels: Option<PathBuf>,
    #[serde(default = "ten")]
    pub classes: usize,
    /// Square side the images are resized to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resize: Option<usize>,
    /// Balanced subsample of the source, this many per class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn ten() -> usize {
    10
}

impl DataSpec {
    pub fn classes(&self) -> usize {
        match self {
            DataSpec::Pinwheel(p) => p.classes,
            DataSpec::Digits(_) => 10,
            DataSpec::Points(p) => p.classes,
            DataSpec::Idx(p) => p.classes,
        }
    }

    /// Shape of one sample, when it is known without reading files.
    fn item_shape(&self) -> Option<Vec<usize>> {
        match self {
            DataSpec::Pinwheel(_) | DataSpec::Points(_) => Some(vec![2]),
            DataSpec::Digits(d) => Some(vec![1, d.size, d.size]),
            DataSpec::Idx(p) => p.resize.map(|s| vec![1, s, s]),
        }
    }

    fn is_image(&self) -> bool {
        matches!(self, DataSpec::Digits(_) | DataSpec::Idx(_))
    }

    fn absolutize(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DataSpec::Points(p) => {
                fix(&mut p.source);
                fix(&mut p.target);
                p.target_eval_labels.as_mut().map(fix);
            }
            DataSpec::Idx(p) => {
                fix(&mut p.source_images);
                fix(&mut p.source_labels);
                fix(&mut p.target_images);
                p.target_labels.as_mut().map(fix);
                p.target_eval_labels.as_mut().map(fix);
            }
            _ => {}
        }
    }
}

/// Size class of the networks filled in when `[arch]` or `[cond_arch]`
/// is omitted for image data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// RealNVP(2, 64, 8) flows and the full encoder/critic stacks.
    #[default]
    Full,
    /// Narrow networks for quick runs on a CPU.
    Compact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    /// Synthesized samples per class for the conditional suite.
    pub samples_per_class: usize,
    /// Samples per domain pushed through both translation cycles.
    pub cycle_samples: usize,
    /// Cap on latents per domain for probes, silhouette and projection.
    pub max_points: usize,
    pub seed: u64,
    pub probe: ProbeConfig,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            samples_per_class: 1000,
            cycle_samples: 1000,
            max_points: 1000,
            seed: 0,
            probe: ProbeConfig::default(),
        }
    }
}

/// A fully resolved run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Copied into `[align]` and `[cond]` unless they set their own.
    #[serde(default)]
    pub seed: u64,
    /// Parent of the run directory. Falls back to `$CDCGEN_OUT_ROOT`,
    /// then `./runs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub preset: Preset,
    pub data: DataSpec,
    #[serde(default)]
    pub align: AlignConfig,
    #[serde(default)]
    pub cond: CondConfig,
    #[serde(default)]
    pub eval: EvalSpec,
    pub arch: Option<AlignArch>,
    pub cond_arch: Option<CondArch>,
}

impl RunConfig {
    /// Parses a run file. `origin` names it in error messages and relative
    /// data paths are resolved against `base`.
    pub fn parse(text: &str, origin: &str, base: &Path) -> Result<Self> {
        let bad = |e: toml::de::Error| Error::Config(format!("{origin}: {e}"));
        // the typed pass reports unknown keys and type errors with positions
        let mut cfg: RunConfig = toml::from_str(text).map_err(bad)?;
        let table: toml::Table = toml::from_str(text).map_err(bad)?;
        let (align, cond) = default_training(&cfg.data);
        cfg.align = overlay(align, table.get("align"), cfg.seed, origin, "align")?;
        cfg.cond = overlay(cond, table.get("cond"), cfg.seed, origin, "cond")?;
        cfg.data.absolutize(base);
        if let Some(dir) = &mut cfg.out_dir {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        cfg.fill_architectures()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        let base = std::path::absolute(&base).map_err(|e| Error::io(&base, e))?;
        Self::parse(&text, &path.display().to_string(), &base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn align_arch(&self) -> &AlignArch {
        self.arch.as_ref().expect("resolved config has an arch")
    }

    pub fn cond_arch(&self) -> &CondArch {
        self.cond_arch
            .as_ref()
            .expect("resolved config has a cond_arch")
    }

    /// `<out_dir>/<name>`.
    pub fn run_dir(&self) -> PathBuf {
        let root = self.out_dir.clone().unwrap_or_else(|| {
            std::env::var_os(OUT_ROOT_ENV)
                .map_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT), PathBuf::from)
        });
        root.join(&self.name)
    }

    fn fill_architectures(&mut self) -> Result<()> {
        let shape = self.data.item_shape();
        let k = self.data.classes();
        if self.arch.is_none() {
            self.arch = Some(match (&shape, self.preset) {
                (Some(s), _) if s.len() == 1 => AlignArch::vector(s[0]),
                (Some(s), Preset::Full) => AlignArch::image(s[0], s[1], s[2]),
                (Some(s), Preset::Compact) => compact_align_arch(s[0], s[1], s[2]),
                (None, _) => {
                    return Err(Error::Config(
                        "[arch] is required when the image size is not set by `resize`".into(),
                    ))
                }
            });
        }
        if self.cond_arch.is_none() {
            let s = self.align_arch().flow_source.input_shape();
            self.cond_arch = Some(match (s.len(), self.preset) {
                (1, _) => CondArch::vector(k, s[0]),
                (_, Preset::Full) => CondArch::image(k, s[0], s[1], s[2]),
                (_, Preset::Compact) => compact_cond_arch(k, s[0], s[1], s[2]),
            });
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || self.name.contains(['/', '\\'])
            || self.name == "."
            || self.name == ".."
        {
            return Err(Error::Config(format!(
                "name `{}` must be a plain directory name",
                self.name
            )));
        }
        self.align.validate()?;
        self.cond.validate()?;
        let arch = self.align_arch();
        arch.validate()?;
        if let Some(s) = self.data.item_shape() {
            if arch.flow_source.input_shape() != s {
                return Err(Error::Config(format!(
                    "data samples have shape {s:?}, [arch] flows expect {:?}",
                    arch.flow_source.input_shape()
                )));
            }
        }
        if arch.dequantize != self.data.is_image() {
            return Err(Error::Config(format!(
                "[arch] dequantize = {} does not suit {} data",
                arch.dequantize,
                if self.data.is_image() {
                    "pixel"
                } else {
                    "real-valued"
                }
            )));
        }
        let ca = self.cond_arch();
        if ca.encoder.classes() != self.data.classes() {
            return Err(Error::Config(format!(
                "[cond_arch] is built for {} classes, data has {}",
                ca.encoder.classes(),
                self.data.classes()
            )));
        }
        if self.eval.samples_per_class == 0 || self.eval.max_points < 2 {
            return Err(Error::Config(
                "[eval] needs samples_per_class >= 1 and max_points >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// Training defaults. Real-valued 2-D data uses larger learning rates:
/// the image-scale rates barely move a small flow in a few thousand steps.
fn default_training(data: &DataSpec) -> (AlignConfig, CondConfig) {
    let mut align = AlignConfig::default();
    let mut cond = CondConfig::default();
    if !data.is_image() {
        align.lr = 1e-3;
        align.steps = 3000;
        cond.lr = 1e-3;
        cond.steps = 2000;
    }
    (align, cond)
}

/// Applies the keys present in a file section on top of `defaults`.
fn overlay<T>(
    defaults: T,
    section: Option<&toml::Value>,
    seed: u64,
    origin: &str,
    name: &str,
) -> Result<T>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let mut table = toml::Table::try_from(&defaults).map_err(|e| Error::Config(e.to_string()))?;
    table.insert("seed".into(), toml::Value::Integer(seed as i64));
    if let Some(v) = section {
        let Some(keys) = v.as_table() else {
            return Err(Error::Config(format!("{origin}: `{name}` must be a table")));
        };
        for (k, v) in keys {
            table.insert(k.clone(), v.clone());
        }
    }
    table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("{origin}: [{name}]: {e}")))
}

/// Narrow alignment networks: RealNVP(2, 16, 2) and small patch critics.
pub fn compact_align_arch(channels: usize, height: usize, width: usize) -> AlignArch {
    let flow = FlowConfig::Image {
        channels,
        height,
        width,
        scales: 2,
        hidden_channels: 16,
        blocks: 2,
    };
    let critic = CriticConfig::Patch {
        channels,
        height,
        width,
        filters: 8,
        blocks: 2,
    };
    AlignArch {
        flow_source: flow.clone(),
        flow_target: flow,
        critic_source: critic.clone(),
        critic_target: critic,
        dal_hidden: 32,
        dequantize: true,
    }
}

/// Narrow conditional networks: the encoder starts from a single pixel and
/// doubles until it reaches the image size.
pub fn compact_cond_arch(classes: usize, channels: usize, height: usize, width: usize) -> CondArch {
    let mut stages = Vec::new();
    let mut side = 1;
    let mut width_c = 64;
    while side * 2 <= height.min(width) && height % (side * 2) == 0 && width % (side * 2) == 0 {
        stages.push(UpStage {
            channels: width_c,
            scale: 2,
        });
        side *= 2;
        width_c = (width_c / 2).max(8);
    }
    stages.push(UpStage { channels, scale: 1 });
    CondArch {
        encoder: EncoderConfig::Image {
            classes,
            noise_dim: 32,
            channels,
            height,
            width,
            fc_channels: 64,
            stages,
        },
        latent_critic: LatentCriticConfig::Image {
            channels,
            height,
            width,
            trunk: vec![16, 32, 64],
            classes,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, "test.toml", Path::new("/base"))
    }

    #[test]
    fn minimal_pinwheel_gets_vector_defaults() {
        let c = parse("name = \"p\"\n[data]\nkind = \"pinwheel\"\n").unwrap();
        assert_eq!(c.align.lr, 1e-3);
        assert_eq!(c.align_arch(), &AlignArch::vector(2));
        assert_eq!(c.cond_arch(), &CondArch::vector(3, 2));
        assert_eq!(c.data, DataSpec::Pinwheel(PinwheelConfig::default()));
    }

    #[test]
    fn partial_section_keeps_other_defaults() {
        let c = parse("name = \"p\"\nseed = 4\n[data]\nkind = \"pinwheel\"\n[align]\nsteps = 7\n")
            .unwrap();
        assert_eq!(c.align.steps, 7);
        assert_eq!(c.align.lr, 1e-3);
        assert_eq!(c.align.seed, 4);
        assert_eq!(c.cond.seed, 4);
    }

    #[test]
    fn image_defaults_follow_the_preset() {
        let c = parse("name = \"d\"\n[data]\nkind = \"digits\"\n").unwrap();
        assert_eq!(c.align.lr, 1e-6);
        assert_eq!(c.align_arch(), &AlignArch::image(1, 16, 16));
        let c = parse("name = \"d\"\npreset = \"compact\"\n[data]\nkind = \"digits\"\n").unwrap();
        assert_eq!(c.align_arch(), &compact_align_arch(1, 16, 16));
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let e = parse("name = \"p\"\n[data]\nkind = \"pinwheel\"\nspokes = 3\n")
            .unwrap_err()
            .to_string();
        // tagged sections are reported at their header
        assert!(e.contains("line 2"), "{e}");
        assert!(e.contains("spokes"), "{e}");
        let e = parse("name = \"p\"\n[data]\nkind = \"pinwheel\"\n[align]\nlr = \"fast\"\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 5"), "{e}");
    }

    #[test]
    fn resolved_config_reparses_to_itself() {
        let c = parse("name = \"p\"\nseed = 3\n[data]\nkind = \"points\"\nsource = \"s.csv\"\ntarget = \"t.csv\"\nclasses = 3\n")
            .unwrap();
        let DataSpec::Points(p) = &c.data else {
            panic!()
        };
        assert_eq!(p.source, Path::new("/base/s.csv"));
        let again = parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn mismatched_arch_is_rejected() {
        let text = format!(
            "name = \"p\"\n[data]\nkind = \"pinwheel\"\n[arch]\n{}",
            toml::to_string(&AlignArch::vector(3)).unwrap()
        );
        assert!(parse(&text).is_err());
    }

    #[test]
    fn path_like_names_are_rejected() {
        assert!(parse("name = \"../x\"\n[data]\nkind = \"pinwheel\"\n").is_err());
    }

    #[test]
    fn compact_encoder_reaches_the_image_size() {
        let a = compact_cond_arch(10, 1, 16, 16);
        let EncoderConfig::Image { stages, .. } = &a.encoder else {
            panic!()
        };
        assert_eq!(stages.iter().map(|s| s.scale).product::<usize>(), 16);
    }
}
