//! Trained multi-scale models and feature extraction.

use serde::{Deserialize, Serialize};

use crate::appearance::AppearanceModel;
use crate::error::{AamError, Result};
use crate::raster::Raster;
use crate::shape::{Components, ShapeModel};
use crate::warp::{build_reference_frame, warp_jacobian_identity, ReferenceFrame, Triangulation, WarpJacobian};

/// Dense per-pixel features computed before warping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureExtractor {
    /// Mean over input channels.
    Grayscale,
    /// Half-wave rectified `+Ix, −Ix, +Iy, −Iy`, each box-smoothed.
    GradientOrientation,
}

impl FeatureExtractor {
    pub fn channels(&self) -> usize {
        match self {
            FeatureExtractor::Grayscale => 1,
            FeatureExtractor::GradientOrientation => 4,
        }
    }

    pub fn extract(&self, image: &Raster) -> Raster {
        let gray = grayscale(image);
        match self {
            FeatureExtractor::Grayscale => gray,
            FeatureExtractor::GradientOrientation => {
                let (gx, gy) = gray.gradient();
                let (w, h) = (gray.width(), gray.height());
                let mut out = Raster::filled(w, h, 4, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let ix = gx.get(x, y, 0);
                        let iy = gy.get(x, y, 0);
                        out.set(x, y, 0, ix.max(0.0));
                        out.set(x, y, 1, (-ix).max(0.0));
                        out.set(x, y, 2, iy.max(0.0));
                        out.set(x, y, 3, (-iy).max(0.0));
                    }
                }
                out.box3()
            }
        }
    }
}

impl FeatureExtractor {
    pub fn id(&self) -> &'static str {
        match self {
            FeatureExtractor::Grayscale => "grayscale",
            FeatureExtractor::GradientOrientation => "gradient_orientation",
        }
    }
}

impl std::str::FromStr for FeatureExtractor {
    type Err = AamError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "grayscale" | "gray" => Ok(FeatureExtractor::Grayscale),
            "gradient_orientation" | "orientation" => Ok(FeatureExtractor::GradientOrientation),
            _ => Err(AamError::Config(format!(
                "unknown feature extractor '{s}' (expected grayscale or gradient_orientation)"
            ))),
        }
    }
}

/// Free-function form of [`FeatureExtractor::extract`].
pub fn extract_features(image: &Raster, extractor: FeatureExtractor) -> Raster {
    extractor.extract(image)
}

fn grayscale(image: &Raster) -> Raster {
    let k = image.channels();
    if k == 1 {
        return image.clone();
    }
    Raster::from_fn(image.width(), image.height(), |x, y| {
        (0..k).map(|ch| image.get(x, y, ch)).sum::<f64>() / k as f64
    })
}

/// Number of 2× reductions for a pyramid scale `2^-h`.
pub fn halvings(scale: f64) -> Result<u32> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(AamError::Config(format!("scale {scale} outside (0, 1]")));
    }
    let h = (1.0 / scale).log2().round();
    if (2f64.powi(-(h as i32)) - scale).abs() > 1e-12 {
        return Err(AamError::Config(format!("scale {scale} is not a power of 1/2")));
    }
    Ok(h as u32)
}

/// Models and reference geometry of one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleLevel {
    pub scale: f64,
    pub shape: ShapeModel,
    pub appearance: AppearanceModel,
    pub frame: ReferenceFrame,
    pub triangulation: Triangulation,
    pub warp_jacobian: WarpJacobian,
}

impl ScaleLevel {
    /// Rebuilds frame, triangulation and warp Jacobian from the shape model.
    pub fn new(scale: f64, shape: ShapeModel, appearance: AppearanceModel, margin: usize) -> Result<Self> {
        let (frame, triangulation) = build_reference_frame(&shape, margin)?;
        let warp_jacobian = warp_jacobian_identity(&shape, &frame, &triangulation);
        Ok(ScaleLevel {
            scale,
            shape,
            appearance,
            frame,
            triangulation,
            warp_jacobian,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        self.appearance.validate()?;
        self.frame.validate()?;
        self.triangulation.validate(&self.frame, self.shape.n_points())?;
        if self.appearance.len() != self.frame.n_pixels() * self.appearance.channels {
            return Err(AamError::Invariant(
                "appearance length does not match the reference frame".into(),
            ));
        }
        if self.warp_jacobian.dx.nrows() != self.frame.n_pixels()
            || self.warp_jacobian.n_params() != self.shape.n_params()
        {
            return Err(AamError::Invariant("warp Jacobian has wrong dimensions".into()));
        }
        Ok(())
    }
}

/// Settings a bundle was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingInfo {
    pub n_images: usize,
    pub shape_components: Components,
    pub appearance_components: Components,
}

/// A trained multi-scale AAM, levels ordered coarse to fine.
#[derive(Debug, Clone, PartialEq)]
pub struct AamBundle {
    pub levels: Vec<ScaleLevel>,
    pub extractor: FeatureExtractor,
    /// Face size images are normalized to at scale 1, in pixels.
    pub face_size: f64,
    pub margin: usize,
    pub training: TrainingInfo,
}

impl AamBundle {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn n_points(&self) -> usize {
        self.levels[0].shape.n_points()
    }

    pub fn scales(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.scale).collect()
    }

    pub fn finest(&self) -> &ScaleLevel {
        self.levels.last().expect("bundle has levels")
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(AamError::Invariant("bundle has no levels".into()));
        }
        let n = self.n_points();
        let mut prev = 0.0;
        for level in &self.levels {
            halvings(level.scale).map_err(|e| AamError::Invariant(e.to_string()))?;
            if level.scale <= prev {
                return Err(AamError::Invariant("scales must increase strictly".into()));
            }
            prev = level.scale;
            if level.shape.n_points() != n {
                return Err(AamError::Invariant("levels disagree on landmark count".into()));
            }
            if level.appearance.channels != self.extractor.channels() {
                return Err(AamError::Invariant("appearance channels do not match extractor".into()));
            }
            level.validate()?;
        }
        if !(self.face_size > 0.0) {
            return Err(AamError::Invariant("face size must be positive".into()));
        }
        Ok(())
    }
}
