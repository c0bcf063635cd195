//! Simulated uniform affine quantization and distortion metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::Matrix;
use crate::model::{model_forward_hooked, ActivationTensor, BlockConfig, ModelParams, Tap, TapHook, TokenBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerChannel,
    PerTensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Asymmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Weights,
    Activations,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub granularity: Granularity,
    pub scheme: Scheme,
    pub target: Target,
}

impl QuantSpec {
    /// Per-channel weights, the WnAm weight half.
    pub fn weights(bits: u32) -> Self {
        Self { bits, granularity: Granularity::PerChannel, scheme: Scheme::Asymmetric, target: Target::Weights }
    }

    /// Per-tensor activations, the WnAm activation half.
    pub fn activations(bits: u32) -> Self {
        Self { bits, granularity: Granularity::PerTensor, scheme: Scheme::Asymmetric, target: Target::Activations }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.bits) {
            return Err(LabError::Parameter(format!("bits must lie in 2..=16, got {}", self.bits)));
        }
        Ok(())
    }

    pub fn levels(&self) -> f64 {
        ((1u32 << self.bits) - 1) as f64
    }
}

/// Range and affine parameters of one channel (or of the whole tensor).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelCalibration {
    pub min: f64,
    pub max: f64,
    pub scale: f64,
    pub zero_point: u32,
}

impl ChannelCalibration {
    pub fn from_range(min: f64, max: f64, bits: u32) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || max < min {
            return Err(LabError::Parameter(format!("invalid calibration range [{min}, {max}]")));
        }
        let levels = ((1u32 << bits) - 1) as f64;
        if max == min {
            return Ok(Self { min, max, scale: 1.0, zero_point: 0 });
        }
        let scale = (max - min) / levels;
        let zero_point = (-min / scale).round_ties_even().clamp(0.0, levels) as u32;
        Ok(Self { min, max, scale, zero_point })
    }

    fn is_degenerate(&self) -> bool {
        self.max == self.min
    }

    /// Quantize-dequantize one value; a constant channel maps everything to
    /// its constant.
    #[inline]
    pub fn fake_quant(&self, x: f64, levels: f64) -> f64 {
        if self.is_degenerate() {
            return self.min;
        }
        let z = self.zero_point as f64;
        let q = ((x / self.scale).round_ties_even() + z).clamp(0.0, levels);
        self.scale * (q - z)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub granularity: Granularity,
    pub bits: u32,
    /// One entry per row for per-channel calibration, otherwise one entry.
    pub channels: Vec<ChannelCalibration>,
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Min/max calibration. Per-channel granularity treats each row of
/// `samples` as one output channel.
pub fn calibrate(samples: &Matrix, spec: &QuantSpec) -> Result<CalibrationStats> {
    spec.validate()?;
    if samples.data().is_empty() {
        return Err(LabError::EmptyData("nothing to calibrate on".into()));
    }
    let channels = match spec.granularity {
        Granularity::PerTensor => {
            let (lo, hi) = min_max(samples.data().iter().copied());
            vec![ChannelCalibration::from_range(lo, hi, spec.bits)?]
        }
        Granularity::PerChannel => (0..samples.rows())
            .map(|r| {
                let (lo, hi) = min_max(samples.row(r).iter().copied());
                ChannelCalibration::from_range(lo, hi, spec.bits)
            })
            .collect::<Result<_>>()?,
    };
    Ok(CalibrationStats { granularity: spec.granularity, bits: spec.bits, channels })
}

/// Elementwise `s * (clamp(round(x / s) + z, 0, 2^b - 1) - z)`.
pub fn fake_quant(x: &Matrix, spec: &QuantSpec, calib: &CalibrationStats) -> Result<Matrix> {
    let levels = spec.levels();
    let mut out = x.clone();
    match calib.granularity {
        Granularity::PerTensor => {
            let c = calib.channels[0];
            out.data_mut().iter_mut().for_each(|v| *v = c.fake_quant(*v, levels));
        }
        Granularity::PerChannel => {
            if calib.channels.len() != x.rows() {
                return Err(LabError::Dimension(format!(
                    "{} calibrated channels for {} rows",
                    calib.channels.len(),
                    x.rows()
                )));
            }
            for (r, c) in calib.channels.iter().enumerate() {
                out.row_mut(r).iter_mut().for_each(|v| *v = c.fake_quant(*v, levels));
            }
        }
    }
    Ok(out)
}

fn energies(x: &[f64], xq: &[f64]) -> Result<(f64, f64)> {
    if x.len() != xq.len() {
        return Err(LabError::Dimension(format!("{} vs {} values", x.len(), xq.len())));
    }
    let signal: f64 = x.iter().map(|v| v * v).sum();
    if signal == 0.0 {
        return Err(LabError::UndefinedMetric("zero signal energy".into()));
    }
    let noise: f64 = x.iter().zip(xq).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((signal, noise))
}

/// `10 log10(|x|^2 / |x - xq|^2)` in dB; `+inf` when the two agree exactly.
pub fn sqnr(x: &[f64], xq: &[f64]) -> Result<f64> {
    let (s, n) = energies(x, xq)?;
    Ok(if n == 0.0 { f64::INFINITY } else { 10.0 * (s / n).log10() })
}

/// `|x - xq|^2 / |x|^2`
pub fn normalized_mse(x: &[f64], xq: &[f64]) -> Result<f64> {
    let (s, n) = energies(x, xq)?;
    Ok(n / s)
}

/// Accumulated distortion at one tap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TapEnergy {
    pub signal: f64,
    pub noise: f64,
}

impl TapEnergy {
    pub fn sqnr_db(&self) -> f64 {
        if self.noise == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (self.signal / self.noise).log10()
        }
    }

    pub fn nmse(&self) -> f64 {
        self.noise / self.signal
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapDistortion {
    pub layer: usize,
    pub tap: String,
    pub sqnr_db: f64,
    pub nmse: f64,
}

/// Per-tap signal and noise energies gathered over quantized forward passes.
#[derive(Clone, Debug, Default)]
pub struct TapMeter {
    energy: BTreeMap<(usize, Tap), TapEnergy>,
}

impl TapMeter {
    pub fn report(&self) -> Vec<TapDistortion> {
        self.energy
            .iter()
            .map(|(&(layer, tap), e)| TapDistortion { layer, tap: tap.label().to_string(), sqnr_db: e.sqnr_db(), nmse: e.nmse() })
            .collect()
    }

    /// Mean per-tap SQNR in dB.
    pub fn mean_sqnr_db(&self) -> f64 {
        let n = self.energy.len() as f64;
        self.energy.values().map(|e| e.sqnr_db()).sum::<f64>() / n
    }

    pub fn mean_nmse(&self) -> f64 {
        let n = self.energy.len() as f64;
        self.energy.values().map(|e| e.nmse()).sum::<f64>() / n
    }
}

/// Weights replaced by fake-quantized copies plus static per-tap activation
/// calibration. Immutable after construction.
#[derive(Clone, Debug)]
pub struct QuantizedModel {
    pub params: ModelParams,
    pub cfg: BlockConfig,
    pub weight_spec: QuantSpec,
    pub activation_spec: QuantSpec,
    pub calibration: BTreeMap<(usize, Tap), CalibrationStats>,
}

/// Quantizes a stored `d_in x d_out` weight per output channel.
fn quantize_weight(w: &Matrix, spec: &QuantSpec) -> Result<Matrix> {
    let as_applied = w.transpose();
    let calib = calibrate(&as_applied, spec)?;
    Ok(fake_quant(&as_applied, spec, &calib)?.transpose())
}

struct Collect<'a> {
    ranges: &'a mut BTreeMap<(usize, Tap), (f64, f64)>,
}

impl TapHook for Collect<'_> {
    fn apply(&mut self, layer: usize, tap: Tap, x: &Matrix) -> Result<Option<Matrix>> {
        let (lo, hi) = min_max(x.data().iter().copied());
        let e = self.ranges.entry((layer, tap)).or_insert((f64::INFINITY, f64::NEG_INFINITY));
        *e = (e.0.min(lo), e.1.max(hi));
        Ok(None)
    }
}

struct Apply<'a> {
    model: &'a QuantizedModel,
    meter: &'a mut TapMeter,
}

impl TapHook for Apply<'_> {
    fn apply(&mut self, layer: usize, tap: Tap, x: &Matrix) -> Result<Option<Matrix>> {
        let calib = self
            .model
            .calibration
            .get(&(layer, tap))
            .ok_or_else(|| LabError::Calibration(format!("layer {layer} {}", tap.label())))?;
        let xq = fake_quant(x, &self.model.activation_spec, calib)?;
        let e = self.meter.energy.entry((layer, tap)).or_default();
        for (a, b) in x.data().iter().zip(xq.data()) {
            e.signal += a * a;
            e.noise += (a - b) * (a - b);
        }
        Ok(Some(xq))
    }
}

/// Quantizes every block weight and the output head per channel (the
/// embedding lookup stays in full precision), then calibrates each
/// activation tap per tensor on `calib_data` run through the
/// weight-quantized model.
pub fn quantize_model(
    params: &ModelParams,
    cfg: &BlockConfig,
    weight_spec: QuantSpec,
    activation_spec: QuantSpec,
    calib_data: &[TokenBatch],
) -> Result<QuantizedModel> {
    weight_spec.validate()?;
    activation_spec.validate()?;
    if calib_data.is_empty() {
        return Err(LabError::EmptyData("no calibration batches".into()));
    }
    let mut q = params.clone();
    for w in q.matrices_mut() {
        *w = quantize_weight(w, &weight_spec)?;
    }
    let mut ranges = BTreeMap::new();
    for batch in calib_data {
        model_forward_hooked(batch, &q, cfg, &mut Collect { ranges: &mut ranges })?;
    }
    let calibration = ranges
        .into_iter()
        .map(|(k, (lo, hi))| Ok((k, CalibrationStats {
            granularity: Granularity::PerTensor,
            bits: activation_spec.bits,
            channels: vec![ChannelCalibration::from_range(lo, hi, activation_spec.bits)?],
        })))
        .collect::<Result<_>>()?;
    Ok(QuantizedModel { params: q, cfg: cfg.clone(), weight_spec, activation_spec, calibration })
}

impl QuantizedModel {
    /// `WnAm` label.
    pub fn label(&self) -> String {
        format!("W{}A{}", self.weight_spec.bits, self.activation_spec.bits)
    }

    /// Forward pass with activation fake-quantization at every tap; the
    /// distortion at each tap is added to `meter`.
    pub fn forward(&self, tokens: &TokenBatch, meter: &mut TapMeter) -> Result<ActivationTensor> {
        let mut hook = Apply { model: self, meter };
        Ok(model_forward_hooked(tokens, &self.params, &self.cfg, &mut hook)?.0)
    }
}
