//! Run configuration: a JSON file with `og`, `fade` and `fusion` sections,
//! layered as command-line flags > config file > manifest export settings >
//! built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DoucError, Result, StageExt};
use crate::eval::DEFAULT_IGNORE_LABEL;
use crate::fade::{InstanceMaskSet, MaskMode, UncoveredPolicy};
use crate::fusion::{Collapse, LabelMap};
use crate::io::{load_manifest, read_tensor_file, ExportConfig, Manifest};
use crate::pipeline::{ImageInput, PipelineConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub id: String,
    pub tokens: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_masks: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_masks: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<PathBuf>,
}

impl ImageEntry {
    fn resolved(&self, base: &Path) -> Self {
        let join = |p: &PathBuf| base.join(p);
        Self {
            id: self.id.clone(),
            tokens: join(&self.tokens),
            features: self.features.as_ref().map(join),
            patch_masks: self.patch_masks.as_ref().map(join),
            pixel_masks: self.pixel_masks.as_ref().map(join),
            gt: self.gt.as_ref().map(join),
        }
    }

    pub fn load(&self) -> Result<ImageInput> {
        let label = |what: &str| format!("image {}/{what}", self.id);
        let tokens = read_tensor_file(&self.tokens)
            .and_then(|t| t.into_tensor2())
            .stage(&label("tokens"))?;
        let grid = |p: &Option<PathBuf>, what: &str| -> Result<_> {
            p.as_ref()
                .map(|p| read_tensor_file(p).and_then(|t| t.into_grid3()).stage(&label(what)))
                .transpose()
        };
        Ok(ImageInput {
            id: self.id.clone(),
            tokens,
            features: grid(&self.features, "features")?,
            patch_masks: grid(&self.patch_masks, "patch_masks")?.map(|g| InstanceMaskSet::from_grid(&g)),
            pixel_masks: grid(&self.pixel_masks, "pixel_masks")?.map(|g| InstanceMaskSet::from_grid(&g)),
        })
    }

    pub fn load_gt(&self) -> Result<Option<LabelMap>> {
        self.gt
            .as_ref()
            .map(|p| {
                read_tensor_file(p)
                    .and_then(|t| t.into_tensor2())
                    .and_then(|t| LabelMap::from_tensor(&t))
                    .stage(&format!("image {}/gt", self.id))
            })
            .transpose()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSection {
    pub layers: Option<Vec<usize>>,
    pub alpha: Option<f32>,
    pub temperature: Option<f32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxySection {
    pub tau: Option<f32>,
    pub mask_mode: Option<MaskMode>,
    pub uncovered_policy: Option<UncoveredPolicy>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSection {
    pub alpha_og: Option<f32>,
    pub alpha_fade: Option<f32>,
    pub lambda_cls: Option<f32>,
    pub collapse: Option<Collapse>,
    pub post_correct: Option<bool>,
}

/// The config file as written; every field optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub images: Vec<ImageEntry>,
    #[serde(default)]
    pub og: GateSection,
    #[serde(default)]
    pub fade: ProxySection,
    #[serde(default)]
    pub fusion: FusionSection,
    pub dump_intermediates: Option<bool>,
    pub jobs: Option<usize>,
    pub ignore_label: Option<usize>,
}

impl ConfigFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DoucError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| {
            let msg = e.to_string();
            let field = msg.split('`').nth(1).unwrap_or("<document>").to_string();
            DoucError::config(field, msg)
        })
    }
}

/// Command-line values; `None` leaves the lower layers in charge.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub alpha_og: Option<f32>,
    pub alpha_fade: Option<f32>,
    pub lambda_cls: Option<f32>,
    pub tau: Option<f32>,
    pub gate_alpha: Option<f32>,
    pub gate_temp: Option<f32>,
    pub gate_layers: Option<Vec<usize>>,
    pub mask_mode: Option<MaskMode>,
    pub post_correct: Option<bool>,
    pub dump_intermediates: Option<bool>,
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: PathBuf,
    /// Entries with paths resolved against the config file's directory.
    pub images: Vec<ImageEntry>,
    pub pipeline: PipelineConfig,
    pub out: PathBuf,
    pub dump_intermediates: bool,
    pub jobs: usize,
    pub ignore_label: usize,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl RunConfig {
    /// Manifest path from flags, else from the file (relative to `base`).
    pub fn manifest_path(file: &ConfigFile, base: &Path, flags: &Overrides) -> Result<PathBuf> {
        flags
            .manifest
            .clone()
            .or_else(|| file.manifest.as_ref().map(|p| base.join(p)))
            .ok_or_else(|| DoucError::config("manifest", "no manifest given (config file or --manifest)"))
    }

    /// Layers the sources; does not touch the filesystem.
    pub fn build(file: &ConfigFile, base: &Path, flags: &Overrides, export: &ExportConfig) -> Result<Self> {
        let manifest = Self::manifest_path(file, base, flags)?;
        let mut p = PipelineConfig {
            og: export.og.clone().unwrap_or_default(),
            fade: export.fade.clone().unwrap_or_default(),
            fusion: export.fusion.clone().unwrap_or_default(),
        };

        fn layer<T: Clone>(dst: &mut T, file: &Option<T>, flag: &Option<T>) {
            if let Some(v) = flag.as_ref().or(file.as_ref()) {
                *dst = v.clone();
            }
        }
        let mut layers = p.og.layers.clone();
        layer(
            &mut layers,
            &file.og.layers.clone().map(Some),
            &flags.gate_layers.clone().map(Some),
        );
        p.og.layers = layers;
        layer(&mut p.og.alpha, &file.og.alpha, &flags.gate_alpha);
        layer(&mut p.og.temperature, &file.og.temperature, &flags.gate_temp);
        layer(&mut p.fade.tau, &file.fade.tau, &flags.tau);
        layer(&mut p.fade.mask_mode, &file.fade.mask_mode, &flags.mask_mode);
        layer(&mut p.fade.uncovered_policy, &file.fade.uncovered_policy, &None);
        layer(&mut p.fusion.alpha_og, &file.fusion.alpha_og, &flags.alpha_og);
        layer(&mut p.fusion.alpha_fade, &file.fusion.alpha_fade, &flags.alpha_fade);
        layer(&mut p.fusion.lambda_cls, &file.fusion.lambda_cls, &flags.lambda_cls);
        layer(&mut p.fusion.collapse, &file.fusion.collapse, &None);
        layer(
            &mut p.fusion.post_correct,
            &file.fusion.post_correct,
            &flags.post_correct,
        );

        let out = flags
            .out
            .clone()
            .or_else(|| file.out.as_ref().map(|o| base.join(o)))
            .unwrap_or_else(|| PathBuf::from("douc-out"));
        let jobs = flags.jobs.or(file.jobs).unwrap_or_else(default_jobs);
        if jobs == 0 {
            return Err(DoucError::config("jobs", "must be at least 1"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for img in &file.images {
            if !seen.insert(&img.id) {
                return Err(DoucError::config("images", format!("duplicate image id `{}`", img.id)));
            }
        }
        Ok(Self {
            manifest,
            images: file.images.iter().map(|e| e.resolved(base)).collect(),
            pipeline: p,
            out,
            dump_intermediates: flags.dump_intermediates.or(file.dump_intermediates).unwrap_or(false),
            jobs,
            ignore_label: file.ignore_label.unwrap_or(DEFAULT_IGNORE_LABEL),
        })
    }

    /// Reads the config file (if any) and manifest, layers and validates.
    pub fn load(config_path: Option<&Path>, flags: &Overrides) -> Result<(Self, Manifest)> {
        let (file, base) = match config_path {
            Some(p) => (
                ConfigFile::read(p)?,
                p.parent().map(Path::to_path_buf).unwrap_or_default(),
            ),
            None => (ConfigFile::default(), PathBuf::new()),
        };
        let manifest_path = Self::manifest_path(&file, &base, flags)?;
        let manifest = load_manifest(&manifest_path)?;
        let cfg = Self::build(&file, &base, flags, &manifest.doc.export_config)?;
        cfg.pipeline.validate(manifest.doc.layer_count)?;
        Ok((cfg, manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionConfig;
    use crate::og::GateConfig;

    fn file() -> ConfigFile {
        serde_json::from_str(
            r#"{
                "manifest": "m.json",
                "out": "o",
                "images": [{"id": "a", "tokens": "a.bin"}],
                "og": {"layers": [1], "alpha": 0.3, "temperature": 0.5},
                "fade": {"tau": 4.0, "mask_mode": "off", "uncovered_policy": "self-only"},
                "fusion": {"alpha_og": 0.6, "alpha_fade": 0.4, "lambda_cls": 0.2, "collapse": "mean", "post_correct": true},
                "dump_intermediates": true,
                "jobs": 3
            }"#,
        )
        .unwrap()
    }

    fn build(file: &ConfigFile, flags: &Overrides, export: &ExportConfig) -> RunConfig {
        RunConfig::build(file, Path::new("/cfg"), flags, export).unwrap()
    }

    #[test]
    fn defaults_apply_without_sources() {
        let f = ConfigFile {
            manifest: Some("m.json".into()),
            ..Default::default()
        };
        let c = build(&f, &Overrides::default(), &ExportConfig::default());
        assert_eq!(c.pipeline, PipelineConfig::default());
        assert_eq!(c.ignore_label, 255);
        assert!(!c.dump_intermediates);
        assert_eq!(c.manifest, PathBuf::from("/cfg/m.json"));
    }

    #[test]
    fn export_config_beats_defaults_and_file_beats_export() {
        let export = ExportConfig {
            og: Some(GateConfig {
                layers: Some(vec![0]),
                alpha: 0.9,
                temperature: 0.1,
            }),
            fusion: Some(FusionConfig {
                lambda_cls: 0.7,
                ..Default::default()
            }),
            ..Default::default()
        };
        let bare = ConfigFile {
            manifest: Some("m.json".into()),
            ..Default::default()
        };
        let c = build(&bare, &Overrides::default(), &export);
        assert_eq!(c.pipeline.og.alpha, 0.9);
        assert_eq!(c.pipeline.fusion.lambda_cls, 0.7);

        let c = build(&file(), &Overrides::default(), &export);
        assert_eq!(c.pipeline.og.alpha, 0.3);
        assert_eq!(c.pipeline.og.layers, Some(vec![1]));
        assert_eq!(c.pipeline.fusion.lambda_cls, 0.2);
    }

    #[test]
    fn file_values_override_defaults_per_field() {
        let c = build(&file(), &Overrides::default(), &ExportConfig::default());
        let p = &c.pipeline;
        assert_eq!(p.og.layers, Some(vec![1]));
        assert_eq!((p.og.alpha, p.og.temperature), (0.3, 0.5));
        assert_eq!(p.fade.tau, 4.0);
        assert_eq!(p.fade.mask_mode, MaskMode::Off);
        assert_eq!(p.fade.uncovered_policy, UncoveredPolicy::SelfOnly);
        assert_eq!(
            (p.fusion.alpha_og, p.fusion.alpha_fade, p.fusion.lambda_cls),
            (0.6, 0.4, 0.2)
        );
        assert_eq!(p.fusion.collapse, Collapse::Mean);
        assert!(p.fusion.post_correct);
        assert!(c.dump_intermediates);
        assert_eq!(c.jobs, 3);
        assert_eq!(c.out, PathBuf::from("/cfg/o"));
        assert_eq!(c.images[0].tokens, PathBuf::from("/cfg/a.bin"));
    }

    #[test]
    fn flags_override_file_per_field() {
        let f = file();
        let none = Overrides::default();
        let base = build(&f, &none, &ExportConfig::default());
        type Case = (Overrides, fn(&RunConfig) -> bool);
        let cases: Vec<Case> = vec![
            (
                Overrides {
                    manifest: Some("/x/m2.json".into()),
                    ..Default::default()
                },
                |c| c.manifest == Path::new("/x/m2.json"),
            ),
            (
                Overrides {
                    out: Some("/x/out".into()),
                    ..Default::default()
                },
                |c| c.out == Path::new("/x/out"),
            ),
            (
                Overrides {
                    alpha_og: Some(0.9),
                    ..Default::default()
                },
                |c| c.pipeline.fusion.alpha_og == 0.9,
            ),
            (
                Overrides {
                    alpha_fade: Some(0.0),
                    ..Default::default()
                },
                |c| c.pipeline.fusion.alpha_fade == 0.0,
            ),
            (
                Overrides {
                    lambda_cls: Some(1.5),
                    ..Default::default()
                },
                |c| c.pipeline.fusion.lambda_cls == 1.5,
            ),
            (
                Overrides {
                    tau: Some(8.0),
                    ..Default::default()
                },
                |c| c.pipeline.fade.tau == 8.0,
            ),
            (
                Overrides {
                    gate_alpha: Some(0.1),
                    ..Default::default()
                },
                |c| c.pipeline.og.alpha == 0.1,
            ),
            (
                Overrides {
                    gate_temp: Some(0.05),
                    ..Default::default()
                },
                |c| c.pipeline.og.temperature == 0.05,
            ),
            (
                Overrides {
                    gate_layers: Some(vec![0, 1]),
                    ..Default::default()
                },
                |c| c.pipeline.og.layers == Some(vec![0, 1]),
            ),
            (
                Overrides {
                    mask_mode: Some(MaskMode::Instance),
                    ..Default::default()
                },
                |c| c.pipeline.fade.mask_mode == MaskMode::Instance,
            ),
            (
                Overrides {
                    post_correct: Some(false),
                    ..Default::default()
                },
                |c| !c.pipeline.fusion.post_correct,
            ),
            (
                Overrides {
                    dump_intermediates: Some(false),
                    ..Default::default()
                },
                |c| !c.dump_intermediates,
            ),
            (
                Overrides {
                    jobs: Some(1),
                    ..Default::default()
                },
                |c| c.jobs == 1,
            ),
        ];
        for (flags, check) in cases {
            assert!(!check(&base), "file value already matches for {flags:?}");
            assert!(check(&build(&f, &flags, &ExportConfig::default())), "{flags:?}");
        }
    }

    #[test]
    fn invalid_files_name_the_field() {
        let err = serde_json::from_str::<ConfigFile>(r#"{"fusion": {"alpha_og": "x"}}"#).unwrap_err();
        assert!(err.to_string().contains("invalid type"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"fusion": {"alpha_oog": 1.0}}"#).unwrap();
        match ConfigFile::read(&p) {
            Err(DoucError::Config { field, .. }) => assert_eq!(field, "alpha_oog"),
            other => panic!("{other:?}"),
        }
        let dup = ConfigFile {
            manifest: Some("m".into()),
            images: vec![
                ImageEntry {
                    id: "a".into(),
                    tokens: "a".into(),
                    features: None,
                    patch_masks: None,
                    pixel_masks: None,
                    gt: None,
                },
                ImageEntry {
                    id: "a".into(),
                    tokens: "b".into(),
                    features: None,
                    patch_masks: None,
                    pixel_masks: None,
                    gt: None,
                },
            ],
            ..Default::default()
        };
        assert!(RunConfig::build(&dup, Path::new(""), &Overrides::default(), &ExportConfig::default()).is_err());
        assert!(RunConfig::build(
            &ConfigFile::default(),
            Path::new(""),
            &Overrides::default(),
            &ExportConfig::default()
        )
        .is_err());
    }
}
