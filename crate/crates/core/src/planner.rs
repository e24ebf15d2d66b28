//! Analytical VRAM and GPU-hour estimates.
//!
//! GB means 10⁹ bytes throughout.

use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::peft::nf4::DEFAULT_BLOCK;

pub const GB: f64 = 1e9;
/// Weights, gradients and optimizer state for full fp32 training.
pub const FULL_TRAIN_MULTIPLIER: f64 = 8.0;
/// bf16 adapter weight, bf16 gradient and two fp32 Adam moments.
pub const ADAPTER_BYTES_PER_PARAM: f64 = 2.0 + 2.0 + 8.0;
/// Divergence threshold for catalog rows.
pub const DIVERGENCE_THRESHOLD: f64 = 0.20;

/// Reference large-model shape: language model, vision tower and projector.
pub const REFERENCE_LM_PARAMS: u64 = 7_300_000_000;
pub const REFERENCE_VISION_PARAMS: u64 = 305_500_000;
pub const REFERENCE_PROJECTOR_PARAMS: u64 = 21_000_000;
pub const REFERENCE_TOTAL_PARAMS: u64 = 7_600_000_000;
pub const REFERENCE_TRAINABLE_PARAMS: u64 = 4_200_000;
/// Published QLoRA anchors: (batch, GB).
pub const QLORA_ANCHORS: [(usize, f64); 2] = [(1, 5.68), (8, 21.0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoragePrecision {
    Float32,
    Bf16,
    Nf4,
}

impl StoragePrecision {
    /// Bytes per parameter excluding NF4 block scales.
    pub fn bytes_per_param(self) -> f64 {
        match self {
            StoragePrecision::Float32 => 4.0,
            StoragePrecision::Bf16 => 2.0,
            StoragePrecision::Nf4 => 0.5,
        }
    }
}

impl FromStr for StoragePrecision {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float32" | "fp32" => Ok(Self::Float32),
            "bf16" | "bfloat16" => Ok(Self::Bf16),
            "nf4" => Ok(Self::Nf4),
            other => Err(invalid(format!("unknown storage precision {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assumptions {
    pub bytes_per_param: f64,
    pub multiplier: Option<f64>,
    pub adapter_bytes_per_param: Option<f64>,
    /// Bytes per (batch · seq_len · d_model · depth) element.
    pub activation_coefficient: Option<f64>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub gb: f64,
    /// NF4 block-scale storage, reported apart from `gb`.
    pub scales_gb: Option<f64>,
    pub assumptions: Assumptions,
}

pub fn load_footprint(params: u64, precision: StoragePrecision) -> Estimate {
    let bpp = precision.bytes_per_param();
    let scales = (precision == StoragePrecision::Nf4).then(|| params as f64 * 4.0 / DEFAULT_BLOCK as f64 / GB);
    Estimate {
        gb: params as f64 * bpp / GB,
        scales_gb: scales,
        assumptions: Assumptions {
            bytes_per_param: bpp,
            multiplier: None,
            adapter_bytes_per_param: None,
            activation_coefficient: None,
            note: match precision {
                StoragePrecision::Nf4 => format!("4-bit codes; one f32 absmax per {DEFAULT_BLOCK} weights reported as scales_gb"),
                _ => "dense weights only".into(),
            },
        },
    }
}

pub fn full_train_vram(params: u64) -> Estimate {
    let load = load_footprint(params, StoragePrecision::Float32);
    Estimate {
        gb: FULL_TRAIN_MULTIPLIER * load.gb,
        scales_gb: None,
        assumptions: Assumptions {
            bytes_per_param: 4.0 * FULL_TRAIN_MULTIPLIER,
            multiplier: Some(FULL_TRAIN_MULTIPLIER),
            adapter_bytes_per_param: None,
            activation_coefficient: None,
            note: "8x the float32 load footprint".into(),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QloraSpec {
    pub base_params: u64,
    pub trainable_params: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationDims {
    pub batch: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub depth: usize,
}

impl ActivationDims {
    fn elements(&self) -> f64 {
        self.batch as f64 * self.seq_len as f64 * self.d_model as f64 * self.depth as f64
    }
}

/// NF4 base + adapter training state + `k · batch · seq · d · depth` bytes.
pub fn qlora_train_vram(spec: &QloraSpec, dims: &ActivationDims, k: f64) -> Result<Estimate> {
    if dims.batch > 0 && (dims.seq_len == 0 || dims.d_model == 0 || dims.depth == 0) {
        return Err(invalid("activation term needs seq_len, d_model and depth"));
    }
    if !(k >= 0.0 && k.is_finite()) {
        return Err(invalid(format!("activation coefficient {k} must be finite and non-negative")));
    }
    let base = load_footprint(spec.base_params, StoragePrecision::Nf4);
    let adapters = spec.trainable_params as f64 * ADAPTER_BYTES_PER_PARAM / GB;
    let act = k * dims.elements() / GB;
    Ok(Estimate {
        gb: base.gb + adapters + act,
        scales_gb: base.scales_gb,
        assumptions: Assumptions {
            bytes_per_param: 0.5,
            multiplier: None,
            adapter_bytes_per_param: Some(ADAPTER_BYTES_PER_PARAM),
            activation_coefficient: Some(k),
            note: format!(
                "nf4 base {:.4} GB + adapters {:.4} GB + activations {:.4} GB (batch {}, seq {}, d {}, depth {})",
                base.gb, adapters, act, dims.batch, dims.seq_len, dims.d_model, dims.depth
            ),
        },
    })
}

/// The `k` that gives equal and opposite relative errors at two anchors.
pub fn calibrate_activation_coefficient(spec: &QloraSpec, dims: &ActivationDims, anchors: [(usize, f64); 2]) -> Result<f64> {
    let fixed = qlora_train_vram(spec, &ActivationDims { batch: 0, ..*dims }, 0.0)?.gb;
    let per = |b: usize| ActivationDims { batch: b, ..*dims }.elements() / GB;
    let [(b1, g1), (b2, g2)] = anchors;
    // (fixed + a1 k)/g1 − 1 = 1 − (fixed + a2 k)/g2
    let (a1, a2) = (per(b1), per(b2));
    let k = (2.0 - fixed / g1 - fixed / g2) / (a1 / g1 + a2 / g2);
    if !(k.is_finite() && k >= 0.0) {
        return Err(invalid("anchors do not admit a non-negative activation coefficient"));
    }
    Ok(k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub total_params: u64,
    pub trainable_params: u64,
    /// Assumed activation shape of the reference model.
    pub seq_len: usize,
    pub d_model: usize,
    pub depth: usize,
    pub batch: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            total_params: REFERENCE_TOTAL_PARAMS,
            trainable_params: REFERENCE_TRAINABLE_PARAMS,
            seq_len: 128,
            d_model: 4096,
            depth: 32,
            batch: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub config: PlannerConfig,
    pub load_float32: Estimate,
    pub load_nf4: Estimate,
    pub full_train: Estimate,
    pub qlora_batch1: Estimate,
    pub qlora_batch: Estimate,
    pub activation_coefficient: f64,
}

/// Calibrate `k` on the reference anchors, then estimate for `config`.
pub fn plan(config: &PlannerConfig) -> Result<MemoryEstimate> {
    let reference = PlannerConfig::default();
    let ref_spec = QloraSpec {
        base_params: reference.total_params,
        trainable_params: reference.trainable_params,
    };
    let ref_dims = ActivationDims {
        batch: 1,
        seq_len: reference.seq_len,
        d_model: reference.d_model,
        depth: reference.depth,
    };
    let k = calibrate_activation_coefficient(&ref_spec, &ref_dims, QLORA_ANCHORS)?;
    let spec = QloraSpec {
        base_params: config.total_params,
        trainable_params: config.trainable_params,
    };
    let dims = |batch| ActivationDims {
        batch,
        seq_len: config.seq_len,
        d_model: config.d_model,
        depth: config.depth,
    };
    Ok(MemoryEstimate {
        config: config.clone(),
        load_float32: load_footprint(config.total_params, StoragePrecision::Float32),
        load_nf4: load_footprint(config.total_params, StoragePrecision::Nf4),
        full_train: full_train_vram(config.total_params),
        qlora_batch1: qlora_train_vram(&spec, &dims(1), k)?,
        qlora_batch: qlora_train_vram(&spec, &dims(config.batch), k)?,
        activation_coefficient: k,
    })
}

impl MemoryEstimate {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let line = |s: &mut String, label: &str, e: &Estimate| {
            let _ = write!(s, "{label:<28} {:>10.4} GB", e.gb);
            if let Some(sc) = e.scales_gb {
                let _ = write!(s, "  (+{sc:.4} GB block scales)");
            }
            let _ = writeln!(s, "  [{}]", e.assumptions.note);
        };
        let _ = writeln!(
            s,
            "parameters {} total, {} trainable; activation coefficient k = {:.4} bytes",
            self.config.total_params, self.config.trainable_params, self.activation_coefficient
        );
        line(&mut s, "load float32", &self.load_float32);
        line(&mut s, "load nf4", &self.load_nf4);
        line(&mut s, "full training", &self.full_train);
        line(&mut s, "qlora training, batch 1", &self.qlora_batch1);
        line(&mut s, &format!("qlora training, batch {}", self.config.batch), &self.qlora_batch);
        s
    }
}

pub fn gpu_hours(gpu_count: f64, hours: f64) -> f64 {
    gpu_count * hours
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogRow {
    pub model: String,
    pub params_text: String,
    pub params: f64,
    pub trainable: Option<f64>,
    pub vram_min_text: String,
    pub vram_min_gb: Option<f64>,
    pub gpu_count_text: String,
    pub gpu_count: Option<f64>,
    pub vram_per_gpu_gb: Option<f64>,
    pub vram_total_text: String,
    pub hours_text: String,
    pub hours: Option<f64>,
    pub gpu_hours_text: String,
    pub gpu_hours: Option<f64>,
    /// Count and hours are written out in full, not abbreviated.
    pub exact: bool,
    /// How the published minimum was obtained: `full`, `load` or `qlora`.
    pub method: String,
}

pub const CATALOG_FIXTURE: &str = include_str!("../fixtures/model_catalog.json");

/// Published rows, labeled as reported.
pub fn catalog() -> &'static [CatalogRow] {
    static ROWS: OnceLock<Vec<CatalogRow>> = OnceLock::new();
    ROWS.get_or_init(|| serde_json::from_str(CATALOG_FIXTURE).expect("catalog fixture is valid JSON"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub published_vram_gb: Option<f64>,
    pub recomputed_vram_gb: f64,
    pub vram_rule: String,
    pub vram_divergent: bool,
    pub published_gpu_hours: Option<f64>,
    pub recomputed_gpu_hours: Option<f64>,
    pub gpu_hours_divergent: bool,
}

fn divergent(published: Option<f64>, recomputed: Option<f64>) -> bool {
    match (published, recomputed) {
        (Some(p), Some(r)) if p > 0.0 => ((r - p) / p).abs() > DIVERGENCE_THRESHOLD,
        _ => false,
    }
}

pub fn table_report(rows: &[CatalogRow]) -> Result<Vec<ReportRow>> {
    let k = plan(&PlannerConfig::default())?.activation_coefficient;
    rows.iter()
        .map(|r| {
            let params = r.params.round() as u64;
            let (vram, rule) = match r.method.as_str() {
                "full" => (full_train_vram(params).gb, "32 bytes/param".to_string()),
                "load" => (load_footprint(params, StoragePrecision::Float32).gb, "float32 load".to_string()),
                "qlora" => {
                    let reference = PlannerConfig::default();
                    let e = qlora_train_vram(
                        &QloraSpec {
                            base_params: params,
                            trainable_params: r.trainable.unwrap_or(0.0).round() as u64,
                        },
                        &ActivationDims {
                            batch: 1,
                            seq_len: reference.seq_len,
                            d_model: reference.d_model,
                            depth: reference.depth,
                        },
                        k,
                    )?;
                    (e.gb, "qlora, batch 1".to_string())
                }
                other => return Err(invalid(format!("unknown catalog method {other:?}"))),
            };
            let hours = match (r.gpu_count, r.hours) {
                (Some(c), Some(h)) => Some(gpu_hours(c, h)),
                _ => None,
            };
            Ok(ReportRow {
                model: r.model.clone(),
                published_vram_gb: r.vram_min_gb,
                recomputed_vram_gb: vram,
                vram_rule: rule,
                vram_divergent: divergent(r.vram_min_gb, Some(vram)),
                published_gpu_hours: r.gpu_hours,
                recomputed_gpu_hours: hours,
                gpu_hours_divergent: divergent(r.gpu_hours, hours),
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_else(|| "Unknown".into())
}

pub fn report_text(rows: &[ReportRow]) -> String {
    let mut s = format!(
        "{:<30} {:>14} {:>14} {:>4} {:>14} {:>14} {:>4}\n",
        "model", "vram pub GB", "vram calc GB", "flag", "gpu-h pub", "gpu-h calc", "flag"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<30} {:>14} {:>14.2} {:>4} {:>14} {:>14} {:>4}",
            r.model,
            opt(r.published_vram_gb),
            r.recomputed_vram_gb,
            if r.vram_divergent { "!" } else { "" },
            opt(r.published_gpu_hours),
            opt(r.recomputed_gpu_hours),
            if r.gpu_hours_divergent { "!" } else { "" },
        );
    }
    s
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from(
        "model,published_vram_gb,recomputed_vram_gb,vram_rule,vram_divergent,published_gpu_hours,recomputed_gpu_hours,gpu_hours_divergent\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.model,
            opt(r.published_vram_gb),
            r.recomputed_vram_gb,
            r.vram_rule,
            r.vram_divergent,
            opt(r.published_gpu_hours),
            opt(r.recomputed_gpu_hours),
            r.gpu_hours_divergent
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_footprints() {
        assert_eq!(load_footprint(7_600_000_000, StoragePrecision::Float32).gb, 30.4);
        let nf4 = load_footprint(7_600_000_000, StoragePrecision::Nf4);
        assert_eq!(nf4.gb, 3.8);
        assert!((nf4.scales_gb.unwrap() - 0.475).abs() < 1e-12);
        assert_eq!(load_footprint(0, StoragePrecision::Bf16).gb, 0.0);
        assert!("int3".parse::<StoragePrecision>().is_err());
    }

    #[test]
    fn full_training() {
        let e = full_train_vram(7_600_000_000).gb;
        assert!((e - 243.2).abs() < 1e-9);
        assert!((e - 240.0).abs() / 240.0 < 0.02);
        assert!((full_train_vram(65_000_000).gb - 2.08).abs() < 1e-12);
        assert_eq!(full_train_vram(1).gb * GB, 32.0);
    }

    #[test]
    fn qlora_anchors() {
        let p = plan(&PlannerConfig::default()).unwrap();
        assert!((p.qlora_batch1.gb - 5.68).abs() / 5.68 < 0.10, "{}", p.qlora_batch1.gb);
        assert!((p.qlora_batch.gb - 21.0).abs() / 21.0 < 0.15, "{}", p.qlora_batch.gb);
        let bare = qlora_train_vram(
            &QloraSpec {
                base_params: 7_600_000_000,
                trainable_params: 0,
            },
            &ActivationDims {
                batch: 0,
                seq_len: 0,
                d_model: 0,
                depth: 0,
            },
            p.activation_coefficient,
        )
        .unwrap();
        assert_eq!(bare.gb, 3.8);
        let missing = ActivationDims {
            batch: 1,
            seq_len: 0,
            d_model: 1,
            depth: 1,
        };
        assert!(qlora_train_vram(&QloraSpec { base_params: 1, trainable_params: 1 }, &missing, 1.0).is_err());
    }

    #[test]
    fn catalog_hours() {
        let rows = table_report(catalog()).unwrap();
        assert_eq!(rows.len(), 14);
        for (c, r) in catalog().iter().zip(&rows) {
            if c.exact {
                assert_eq!(r.recomputed_gpu_hours, c.gpu_hours, "{}", c.model);
            }
        }
        let by = |m: &str| rows.iter().find(|r| r.model == m).unwrap();
        assert_eq!(by("GPT-1").recomputed_gpu_hours, Some(5760.0));
        assert!(!by("GPT-1").gpu_hours_divergent);
        assert!(by("GPT-3").vram_divergent);
        assert!((by("GPT-3").recomputed_vram_gb - 5600.0).abs() < 1e-6);
        assert_eq!(by("Mistral-7B").recomputed_gpu_hours, None);
        assert!(table_report(&[]).unwrap().is_empty());
    }
}
