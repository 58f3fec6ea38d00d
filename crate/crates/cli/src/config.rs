//! Experiment and domain description files.
//!
//! Both kinds of file are human-editable key-value text (TOML) with a JSON
//! fallback: content starting with `{` parses as JSON, anything else as
//! TOML. Every file carries a `schema_version` so old files fail loudly
//! instead of silently meaning something new.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use sfda_core::bench::{Affine, DomainSpec, LabelMode};
use sfda_core::error::{Error, Result};
use sfda_core::matrix::DenseMatrix;
use sfda_core::methods::{CommonConfig, MethodConfig, MethodKind, MethodSpec};
use sfda_core::nn::TrainableMask;
use sfda_core::pseudo::{SolverConfig, UpdateFrequency};

pub const SCHEMA_VERSION: u32 = 1;

/// Parse TOML-or-JSON text into any deserializable shape.
fn parse_flexible<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| Error::config(format!("{what}: {e}")))
    } else {
        toml::from_str(text).map_err(|e| Error::config(format!("{what}: {e}")))
    }
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))
}

fn check_version(version: u32, path: &Path) -> Result<()> {
    if version != SCHEMA_VERSION {
        return Err(Error::config(format!(
            "{} has schema_version {version}, this build reads {SCHEMA_VERSION}",
            path.display()
        )));
    }
    Ok(())
}

/// Names become file names and CSV fields, so keep them boring.
fn check_name(name: &str, path: &Path) -> Result<()> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if !ok {
        return Err(Error::config(format!(
            "domain name {name:?} in {} may only use letters, digits, '_' and '-'",
            path.display()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- domain files

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainSpecFile {
    schema_version: u32,
    name: String,
    /// "single" or "multi".
    label_mode: String,
    priors: Option<Vec<f64>>,
    activation: Option<Vec<f64>>,
    noise_scale: f64,
    prototypes: Vec<Vec<f64>>,
    covariate: Option<CovariateSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CovariateSection {
    scale: Option<f64>,
    offset: Option<f64>,
    added_noise: Option<f64>,
    feature_dropout: Option<f64>,
}

/// Load a domain description file into a validated generative spec.
pub fn load_domain_spec(path: &Path) -> Result<DomainSpec> {
    let file: DomainSpecFile = parse_flexible(&read_file(path)?, &path.display().to_string())?;
    check_version(file.schema_version, path)?;
    check_name(&file.name, path)?;

    let rows = file.prototypes.len();
    if rows == 0 {
        return Err(Error::config(format!("{}: prototypes must be non-empty", path.display())));
    }
    let cols = file.prototypes[0].len();
    if file.prototypes.iter().any(|r| r.len() != cols) {
        return Err(Error::config(format!(
            "{}: prototype rows have unequal lengths",
            path.display()
        )));
    }
    let mut prototypes = DenseMatrix::zeros(rows, cols);
    for (i, row) in file.prototypes.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            prototypes.set(i, j, v);
        }
    }

    let label_mode = match file.label_mode.as_str() {
        "single" => {
            if file.activation.is_some() {
                return Err(Error::config(format!(
                    "{}: single-label domains take priors, not activation",
                    path.display()
                )));
            }
            let priors = file.priors.ok_or_else(|| {
                Error::config(format!("{}: single-label domains need priors", path.display()))
            })?;
            LabelMode::Single { priors }
        }
        "multi" => {
            if file.priors.is_some() {
                return Err(Error::config(format!(
                    "{}: multi-label domains take activation, not priors",
                    path.display()
                )));
            }
            let activation = file.activation.ok_or_else(|| {
                Error::config(format!("{}: multi-label domains need activation", path.display()))
            })?;
            LabelMode::Multi { activation }
        }
        other => {
            return Err(Error::config(format!(
                "{}: label_mode must be \"single\" or \"multi\", got {other:?}",
                path.display()
            )))
        }
    };

    let mut spec = DomainSpec::new(file.name, prototypes, label_mode, file.noise_scale)?;
    if let Some(cov) = file.covariate {
        if cov.scale.is_some() || cov.offset.is_some() {
            spec.covariate.affine = Some(Affine::scale_offset(
                cols,
                cov.scale.unwrap_or(1.0),
                cov.offset.unwrap_or(0.0),
            ));
        }
        spec.covariate.added_noise = cov.added_noise.unwrap_or(0.0);
        spec.covariate.feature_dropout = cov.feature_dropout.unwrap_or(0.0);
        spec.validate()?;
    }
    Ok(spec)
}

// ------------------------------------------------------------ experiment files

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    schema_version: u32,
    /// Optional cross-check against the source spec: "single_label" or
    /// "multi_label".
    task: Option<String>,
    output_dir: String,
    split_ratio: Option<f64>,
    seeds: Vec<u64>,
    source: SourceSection,
    #[serde(default)]
    domains: Vec<DomainSection>,
    method: Option<MethodSection>,
    grid: Option<GridSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceSection {
    spec: String,
    n: usize,
    epochs: usize,
    seed: u64,
    dropout: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainSection {
    spec: String,
    n: usize,
    seed: u64,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct GridSection {
    domain: Option<String>,
    epochs: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MethodSection {
    name: String,
    lr: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    /// "all" or "batch_norm_only".
    trainable: Option<String>,
    use_dropout: Option<bool>,
    use_source_bn_stats: Option<bool>,
    cosine_decay: Option<bool>,
    alpha: Option<f64>,
    lambda: Option<f64>,
    ccp_iterations: Option<usize>,
    ccp_tolerance: Option<f64>,
    /// "every_epoch" or "every_iteration".
    update_frequency: Option<String>,
    graph_k: Option<usize>,
    threshold: Option<f64>,
    passes: Option<usize>,
    kl_quantile: Option<f64>,
    beta: Option<f64>,
    k: Option<usize>,
    extended_k: Option<usize>,
    base_affinity: Option<f64>,
}

/// The method column of an experiment: a real adaptation method, or the
/// unadapted source model as an evaluation-only baseline.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodChoice {
    Source,
    Configured(MethodConfig),
}

impl MethodChoice {
    pub fn label(&self) -> String {
        match self {
            MethodChoice::Source => "source".to_string(),
            MethodChoice::Configured(cfg) => cfg.kind().name().to_string(),
        }
    }

    pub fn hash_label(&self) -> String {
        match self {
            MethodChoice::Source => "source".to_string(),
            MethodChoice::Configured(cfg) => cfg.hash(),
        }
    }
}

/// One domain to generate and adapt to.
#[derive(Debug, Clone)]
pub struct DomainEntry {
    pub spec: DomainSpec,
    pub n: usize,
    pub seed: u64,
}

/// Source training description.
#[derive(Debug, Clone)]
pub struct SourceEntry {
    pub spec: DomainSpec,
    pub n: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dropout: f64,
}

/// Grid-search options.
#[derive(Debug, Clone, Default)]
pub struct GridOptions {
    pub domain: Option<String>,
    pub epochs: Option<usize>,
}

/// A fully loaded, validated experiment: spec files resolved and parsed,
/// method mapped onto its config.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub split_ratio: f64,
    pub seeds: Vec<u64>,
    pub source: SourceEntry,
    pub domains: Vec<DomainEntry>,
    pub method: Option<MethodChoice>,
    pub grid: GridOptions,
}

pub fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    let file: ExperimentFile = parse_flexible(&read_file(path)?, &path.display().to_string())?;
    check_version(file.schema_version, path)?;
    if file.seeds.is_empty() {
        return Err(Error::config(format!("{}: seeds must be non-empty", path.display())));
    }
    {
        let mut sorted = file.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != file.seeds.len() {
            return Err(Error::config(format!("{}: seeds contain duplicates", path.display())));
        }
    }
    let split_ratio = file.split_ratio.unwrap_or(0.75);
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(Error::config(format!(
            "{}: split_ratio must lie strictly inside (0, 1), got {split_ratio}",
            path.display()
        )));
    }

    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |rel: &str| -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };

    let source_spec_path = resolve(&file.source.spec);
    if !source_spec_path.is_file() {
        return Err(Error::config(format!(
            "source spec file {} does not exist",
            source_spec_path.display()
        )));
    }
    let source_spec = load_domain_spec(&source_spec_path)?;
    if let Some(task) = &file.task {
        let expect = source_spec.task().to_string();
        if task != &expect {
            return Err(Error::config(format!(
                "{}: task is {task:?} but the source spec is {expect}",
                path.display()
            )));
        }
    }
    let source = SourceEntry {
        spec: source_spec,
        n: file.source.n,
        epochs: file.source.epochs,
        seed: file.source.seed,
        dropout: file.source.dropout.unwrap_or(0.25),
    };

    let mut domains = Vec::with_capacity(file.domains.len());
    for d in &file.domains {
        let spec_path = resolve(&d.spec);
        if !spec_path.is_file() {
            return Err(Error::config(format!(
                "domain spec file {} does not exist",
                spec_path.display()
            )));
        }
        let spec = load_domain_spec(&spec_path)?;
        if spec.task() != source.spec.task() {
            return Err(Error::config(format!(
                "domain {} is {} but the source domain is {}",
                spec.name,
                spec.task(),
                source.spec.task()
            )));
        }
        if spec.feature_dim != source.spec.feature_dim
            || spec.class_count != source.spec.class_count
        {
            return Err(Error::config(format!(
                "domain {} is {} classes x {} features, source is {} x {}",
                spec.name,
                spec.class_count,
                spec.feature_dim,
                source.spec.class_count,
                source.spec.feature_dim
            )));
        }
        domains.push(DomainEntry { spec, n: d.n, seed: d.seed });
    }
    {
        let mut names: Vec<&str> = domains.iter().map(|d| d.spec.name.as_str()).collect();
        names.push(&source.spec.name);
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("domain names must be unique across all spec files"));
        }
    }

    let method = match &file.method {
        None => None,
        Some(section) => Some(build_method(section)?),
    };
    let grid = file
        .grid
        .map(|g| GridOptions { domain: g.domain, epochs: g.epochs })
        .unwrap_or_default();

    Ok(ExperimentConfig {
        output_dir: resolve(&file.output_dir),
        split_ratio,
        seeds: file.seeds,
        source,
        domains,
        method,
        grid,
    })
}

fn parse_mask(s: &str) -> Result<TrainableMask> {
    match s {
        "all" => Ok(TrainableMask::All),
        "batch_norm_only" => Ok(TrainableMask::BatchNormOnly),
        other => Err(Error::config(format!(
            "trainable must be \"all\" or \"batch_norm_only\", got {other:?}"
        ))),
    }
}

fn parse_frequency(s: &str) -> Result<UpdateFrequency> {
    match s {
        "every_epoch" => Ok(UpdateFrequency::EveryEpoch),
        "every_iteration" => Ok(UpdateFrequency::EveryIteration),
        other => Err(Error::config(format!(
            "update_frequency must be \"every_epoch\" or \"every_iteration\", got {other:?}"
        ))),
    }
}

fn build_solver(section: &MethodSection, lambda: f64) -> Result<SolverConfig> {
    let alpha = section.alpha.unwrap_or(1.0);
    let mut solver = SolverConfig::new(alpha, lambda)?.with_iterations(
        section.ccp_iterations.unwrap_or(1),
        section.ccp_tolerance.unwrap_or(1e-10),
    )?;
    if let Some(freq) = &section.update_frequency {
        solver.update_frequency = parse_frequency(freq)?;
    }
    Ok(solver)
}

/// Map the flat method section onto a method config, rejecting keys that do
/// not belong to the chosen method.
fn build_method(section: &MethodSection) -> Result<MethodChoice> {
    // (key name, set?, methods it belongs to)
    let specific: [(&str, bool, &[&str]); 11] = [
        ("alpha", section.alpha.is_some(), &["notela", "dropout_student"]),
        ("lambda", section.lambda.is_some(), &["notela", "dropout_student"]),
        (
            "ccp_iterations",
            section.ccp_iterations.is_some(),
            &["notela", "dropout_student"],
        ),
        (
            "ccp_tolerance",
            section.ccp_tolerance.is_some(),
            &["notela", "dropout_student"],
        ),
        (
            "update_frequency",
            section.update_frequency.is_some(),
            &["notela", "dropout_student"],
        ),
        ("graph_k", section.graph_k.is_some(), &["notela"]),
        ("threshold", section.threshold.is_some(), &["pl"]),
        ("passes", section.passes.is_some(), &["dust"]),
        ("kl_quantile", section.kl_quantile.is_some(), &["dust"]),
        ("beta", section.beta.is_some(), &["shot_lite"]),
        ("base_affinity", section.base_affinity.is_some(), &["nrc_lite"]),
    ];
    // k and extended_k are nrc-only; notela's neighbour count is graph_k.
    let nrc_keys = [("k", section.k.is_some()), ("extended_k", section.extended_k.is_some())];
    let name = section.name.as_str();
    for (key, set, methods) in &specific {
        if *set && !methods.contains(&name) {
            return Err(Error::config(format!("{key} does not apply to method {name:?}")));
        }
    }
    for (key, set) in &nrc_keys {
        if *set && name != "nrc_lite" {
            return Err(Error::config(format!("{key} does not apply to method {name:?}")));
        }
    }

    if name == "source" {
        if section.lr.is_some() || section.epochs.is_some() || section.batch_size.is_some() {
            return Err(Error::config(
                "the source baseline takes no training knobs; remove lr/epochs/batch_size",
            ));
        }
        return Ok(MethodChoice::Source);
    }

    let kind = MethodKind::all()
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| {
            let names: Vec<&str> = MethodKind::all().iter().map(|k| k.name()).collect();
            Error::config(format!(
                "unknown method {name:?}; expected one of {} or source",
                names.join(", ")
            ))
        })?;

    let default_epochs = if kind == MethodKind::AdaBn { 1 } else { 30 };
    let mut common = CommonConfig::new(section.lr.unwrap_or(1e-4), section.epochs.unwrap_or(default_epochs));
    if let Some(b) = section.batch_size {
        common.batch_size = b;
    }
    if let Some(mask) = &section.trainable {
        common.trainable = parse_mask(mask)?;
    }
    if let Some(v) = section.use_dropout {
        common.use_dropout = v;
    }
    if let Some(v) = section.use_source_bn_stats {
        common.use_source_bn_stats = v;
    }
    if let Some(v) = section.cosine_decay {
        common.cosine_decay = v;
    }

    let spec = match kind {
        MethodKind::Notela => {
            let alpha = section.alpha.unwrap_or(1.0);
            let lambda = section.lambda.unwrap_or(alpha);
            MethodSpec::Notela {
                solver: build_solver(section, lambda)?,
                k: section.graph_k.unwrap_or(10),
            }
        }
        MethodKind::DropoutStudent => {
            if section.lambda.is_some_and(|l| l != 0.0) {
                return Err(Error::config(
                    "dropout_student is the lambda = 0 method; drop the lambda key or set it to 0",
                ));
            }
            MethodSpec::DropoutStudent { solver: build_solver(section, 0.0)? }
        }
        MethodKind::Pl => MethodSpec::Pl { threshold: section.threshold.unwrap_or(0.9) },
        MethodKind::Em => MethodSpec::Em,
        MethodKind::AdaBn => MethodSpec::AdaBn,
        MethodKind::Dust => MethodSpec::Dust {
            passes: section.passes.unwrap_or(3),
            kl_quantile: section.kl_quantile.unwrap_or(0.9),
        },
        MethodKind::ShotLite => MethodSpec::ShotLite { beta: section.beta.unwrap_or(0.3) },
        MethodKind::NrcLite => MethodSpec::NrcLite {
            k: section.k.unwrap_or(5),
            extended_k: section.extended_k.unwrap_or(5),
            base_affinity: section.base_affinity.unwrap_or(0.1),
        },
    };
    Ok(MethodChoice::Configured(MethodConfig::new(common, spec)?))
}
