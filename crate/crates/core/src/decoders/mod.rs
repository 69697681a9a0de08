//! Decoding distributions p(x|z).
//!
//! Every kernel maps decoder outputs for a batch to a per-sample negative
//! log-likelihood in nats, summed (never averaged) over the data dimensions.
//! The leading axis is always the batch axis.
//!
//! Pixel quantization is global: byte `k` is the float `k / 255`, and the
//! discretized likelihoods integrate over bins centred on those values with
//! half-width `1 / 510`; the first and last bins extend to `-inf` and
//! `+inf`.

mod discrete;
mod discretized;
mod gaussian;
mod sample;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Var;

pub use discrete::{bernoulli_nll, bitwise_categorical_nll, byte_bits, categorical_nll};
pub use discretized::{
    discretized_gaussian_nll, discretized_gaussian_pmf, discretized_logistic_mixture_nll,
    logistic_mixture_pmf, log_ndtr, LOG_SCALE_FLOOR,
};
pub use gaussian::{
    gaussian_nll, optimal_log_sigma, optimal_sigma_sq, soft_clip, soft_clip_value, HALF_LN_2PI,
};
pub use sample::{decoder_sample, DecoderOutput, SampleMode};

/// Bounds on the log standard deviation λ = ln σ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipBounds {
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl Default for ClipBounds {
    fn default() -> Self {
        ClipBounds {
            lambda_min: -6.0,
            lambda_max: 0.0,
        }
    }
}

impl ClipBounds {
    pub fn new(lambda_min: f64, lambda_max: f64) -> Result<Self> {
        let b = ClipBounds {
            lambda_min,
            lambda_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_min < self.lambda_max) || !self.lambda_min.is_finite() || !self.lambda_max.is_finite() {
            return Err(Error::Config(format!(
                "clip bounds need finite lambda_min < lambda_max, got ({}, {})",
                self.lambda_min, self.lambda_max
            )));
        }
        Ok(())
    }

    pub fn sigma_range(&self) -> (f64, f64) {
        (self.lambda_min.exp(), self.lambda_max.exp())
    }
}

/// Axes of an image batch `[batch, channel, row, column]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Batch,
    Channel,
    Row,
    Column,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Batch, Axis::Channel, Axis::Row, Axis::Column];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Which axes a variance estimate averages over. Every combination of the
/// non-pooled axes owns one σ. Serializes as its [`name`](Self::name).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct SharingScheme {
    pooled: Vec<Axis>,
}

impl SharingScheme {
    pub fn new(axes: &[Axis]) -> Self {
        let mut pooled = axes.to_vec();
        pooled.sort();
        pooled.dedup();
        SharingScheme { pooled }
    }

    /// One σ for everything.
    pub fn shared() -> Self {
        Self::new(&Axis::ALL)
    }

    /// One σ per image.
    pub fn per_image() -> Self {
        Self::new(&[Axis::Channel, Axis::Row, Axis::Column])
    }

    /// One σ per channel, shared across images and positions.
    pub fn per_channel() -> Self {
        Self::new(&[Axis::Batch, Axis::Row, Axis::Column])
    }

    /// One σ per sub-pixel, shared across the images of a batch.
    pub fn per_pixel() -> Self {
        Self::new(&[Axis::Batch])
    }

    pub fn pooled(&self) -> &[Axis] {
        &self.pooled
    }

    pub fn pools(&self, axis: Axis) -> bool {
        self.pooled.contains(&axis)
    }

    pub fn axis_indices(&self) -> Vec<usize> {
        self.pooled.iter().map(|a| a.index()).collect()
    }

    /// Number of variance parameters for images of shape `[c, h, w]`,
    /// counted per image when the batch axis is not pooled.
    pub fn parameter_count(&self, chw: [usize; 3]) -> usize {
        [Axis::Channel, Axis::Row, Axis::Column]
            .iter()
            .zip(chw)
            .filter(|(a, _)| !self.pools(**a))
            .map(|(_, d)| d)
            .product()
    }

    /// True when each image gets its own σ group(s).
    pub fn is_per_image(&self) -> bool {
        !self.pools(Axis::Batch)
    }

    /// Ordering key by variance-parameter count: batch-shared schemes
    /// before per-image ones at equal count.
    pub fn complexity(&self, chw: [usize; 3]) -> (usize, bool) {
        (self.parameter_count(chw), self.is_per_image())
    }

    pub fn name(&self) -> String {
        if *self == Self::shared() {
            return "shared".into();
        }
        if *self == Self::per_image() {
            return "per-image".into();
        }
        if *self == Self::per_channel() {
            return "per-channel".into();
        }
        if *self == Self::per_pixel() {
            return "per-pixel".into();
        }
        let letters: Vec<&str> = self
            .pooled
            .iter()
            .map(|a| match a {
                Axis::Batch => "b",
                Axis::Channel => "c",
                Axis::Row => "h",
                Axis::Column => "w",
            })
            .collect();
        format!("pool:{}", letters.join(""))
    }

    /// Parses `shared`, `per-image`, `per-channel`, `per-pixel`, or
    /// `pool:` followed by axis letters from `bchw` (e.g. `pool:bw`).
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "shared" => Ok(Self::shared()),
            "per-image" => Ok(Self::per_image()),
            "per-channel" => Ok(Self::per_channel()),
            "per-pixel" => Ok(Self::per_pixel()),
            other => {
                let letters = other.strip_prefix("pool:").ok_or_else(|| {
                    Error::Config(format!("unknown sharing scheme '{other}'"))
                })?;
                let axes = letters
                    .chars()
                    .map(|c| match c {
                        'b' => Ok(Axis::Batch),
                        'c' => Ok(Axis::Channel),
                        'h' => Ok(Axis::Row),
                        'w' => Ok(Axis::Column),
                        _ => Err(Error::Config(format!("unknown axis '{c}' in '{other}'"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Self::new(&axes))
            }
        }
    }
}

impl From<SharingScheme> for String {
    fn from(s: SharingScheme) -> String {
        s.name()
    }
}

impl TryFrom<String> for SharingScheme {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

/// The decoding distribution and its per-variant parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecoderKind {
    /// Gaussian with σ = 1.
    UnitGaussian,
    /// Gaussian with one learned global σ.
    SharedSigma,
    /// Gaussian whose σ is predicted per sub-pixel by the network.
    PerPixelSigma,
    /// Gaussian whose σ is the analytic maximum-likelihood estimate.
    OptimalSigma { sharing: SharingScheme },
    Bernoulli,
    Categorical256,
    BitwiseCategorical,
    /// Gaussian integrated over the 256 intensity bins, σ per sub-pixel.
    DiscretizedGaussian,
    /// Mixture of logistics integrated over the 256 intensity bins.
    DiscretizedLogisticMixture { components: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    pub kind: DecoderKind,
    #[serde(default)]
    pub clip: ClipBounds,
}

pub const DEFAULT_MIXTURE_COMPONENTS: usize = 5;

impl DecoderSpec {
    pub fn new(kind: DecoderKind) -> Self {
        DecoderSpec {
            kind,
            clip: ClipBounds::default(),
        }
    }

    pub fn unit_gaussian() -> Self {
        Self::new(DecoderKind::UnitGaussian)
    }

    pub fn shared_sigma() -> Self {
        Self::new(DecoderKind::SharedSigma)
    }

    pub fn optimal_sigma(sharing: SharingScheme) -> Self {
        Self::new(DecoderKind::OptimalSigma { sharing })
    }

    pub fn logistic_mixture(components: usize) -> Self {
        Self::new(DecoderKind::DiscretizedLogisticMixture { components })
    }

    pub fn validate(&self) -> Result<()> {
        self.clip.validate()?;
        if let DecoderKind::DiscretizedLogisticMixture { components: 0 } = self.kind {
            return Err(Error::Config("logistic mixture needs at least one component".into()));
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            DecoderKind::UnitGaussian => "unit_gaussian",
            DecoderKind::SharedSigma => "shared_sigma",
            DecoderKind::PerPixelSigma => "per_pixel_sigma",
            DecoderKind::OptimalSigma { .. } => "optimal_sigma",
            DecoderKind::Bernoulli => "bernoulli",
            DecoderKind::Categorical256 => "categorical256",
            DecoderKind::BitwiseCategorical => "bitwise_categorical",
            DecoderKind::DiscretizedGaussian => "discretized_gaussian",
            DecoderKind::DiscretizedLogisticMixture { .. } => "discretized_logistic_mixture",
        }
    }

    /// Decoder head outputs per data dimension.
    pub fn outputs_per_dim(&self) -> usize {
        match self.kind {
            DecoderKind::UnitGaussian
            | DecoderKind::SharedSigma
            | DecoderKind::OptimalSigma { .. }
            | DecoderKind::Bernoulli => 1,
            DecoderKind::PerPixelSigma | DecoderKind::DiscretizedGaussian => 2,
            DecoderKind::Categorical256 => 256,
            DecoderKind::BitwiseCategorical => 8,
            DecoderKind::DiscretizedLogisticMixture { components } => 3 * components,
        }
    }

    /// True for decoders with a continuous Gaussian density over `[0, 1]`.
    pub fn is_continuous_gaussian(&self) -> bool {
        matches!(
            self.kind,
            DecoderKind::UnitGaussian
                | DecoderKind::SharedSigma
                | DecoderKind::PerPixelSigma
                | DecoderKind::OptimalSigma { .. }
        )
    }
}

/// Sums every axis but the leading batch axis.
pub(crate) fn per_sample_sum(v: Var<'_>) -> Var<'_> {
    let nd = v.shape().len();
    if nd <= 1 {
        return v;
    }
    let axes: Vec<usize> = (1..nd).collect();
    v.sum_axes(&axes, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sharing_schemes_serialize_by_name() {
        let kind = DecoderKind::OptimalSigma {
            sharing: SharingScheme::new(&[Axis::Row, Axis::Batch]),
        };
        let json = serde_json::to_string(&kind).unwrap();
        assert_eq!(json, r#"{"variant":"optimal_sigma","sharing":"pool:bh"}"#);
        assert_eq!(serde_json::from_str::<DecoderKind>(&json).unwrap(), kind);
        assert!(serde_json::from_str::<SharingScheme>(r#""per-galaxy""#).is_err());
    }

    #[test]
    fn parameter_counts() {
        let chw = [1, 16, 16];
        assert_eq!(SharingScheme::shared().parameter_count(chw), 1);
        assert_eq!(SharingScheme::per_image().parameter_count(chw), 1);
        assert!(SharingScheme::per_image().is_per_image());
        assert_eq!(SharingScheme::per_pixel().parameter_count(chw), 256);
        assert_eq!(SharingScheme::per_channel().parameter_count([3, 4, 4]), 3);
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in [
            SharingScheme::shared(),
            SharingScheme::per_image(),
            SharingScheme::per_channel(),
            SharingScheme::per_pixel(),
            SharingScheme::new(&[Axis::Batch, Axis::Column]),
            SharingScheme::new(&[]),
        ] {
            assert_eq!(SharingScheme::parse(&s.name()).unwrap(), s);
        }
        assert!(SharingScheme::parse("per-galaxy").is_err());
    }

    #[test]
    fn clip_bounds_validate() {
        assert!(ClipBounds::new(-6.0, 0.0).is_ok());
        assert!(ClipBounds::new(0.0, 0.0).is_err());
        assert!(ClipBounds::new(1.0, -1.0).is_err());
    }

    #[test]
    fn spec_json_shape() {
        let spec = DecoderSpec::optimal_sigma(SharingScheme::per_image());
        let json = serde_json::to_string(&spec).unwrap();
        let back: DecoderSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let parsed: DecoderSpec =
            serde_json::from_str(r#"{"kind":{"variant":"discretized_logistic_mixture","components":3}}"#).unwrap();
        assert_eq!(parsed.outputs_per_dim(), 9);
        assert_eq!(parsed.clip, ClipBounds::default());
    }
}
