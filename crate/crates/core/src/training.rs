//! Multi-scale AAM construction from annotated images.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appearance::build_appearance_model;
use crate::dataset::AnnotatedImage;
use crate::error::{AamError, Result};
use crate::model::{halvings, AamBundle, FeatureExtractor, ScaleLevel, TrainingInfo};
use crate::raster::Raster;
use crate::shape::{build_shape_model, procrustes_align, Components, PcaSummary, Shape, ShapeModel};
use crate::shape::{PROCRUSTES_MAX_ITERS, PROCRUSTES_TOL};
use crate::warp::{build_reference_frame, warp_to_reference};

/// Training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Pyramid scales relative to the normalized images, each a power of 1/2.
    pub scales: Vec<f64>,
    /// Face size the training images are normalized to at scale 1.
    pub face_size: f64,
    pub shape_components: Components,
    pub appearance_components: Components,
    pub extractor: FeatureExtractor,
    /// Extra pixels around the mean shape in the reference frame.
    pub margin: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scales: vec![0.5, 1.0],
            face_size: 150.0,
            shape_components: Components::VarianceRatio(0.95),
            appearance_components: Components::VarianceRatio(0.75),
            extractor: FeatureExtractor::Grayscale,
            margin: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(AamError::Config("at least one scale is required".into()));
        }
        for &s in &self.scales {
            halvings(s)?;
        }
        if self.scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(AamError::Config("scales must be strictly increasing".into()));
        }
        if !(self.face_size >= 8.0 && self.face_size.is_finite()) {
            return Err(AamError::Config(format!("face size {} too small", self.face_size)));
        }
        for c in [self.shape_components, self.appearance_components] {
            if let Components::VarianceRatio(r) = c {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(AamError::Config(format!("variance ratio {r} outside (0, 1]")));
                }
            }
        }
        Ok(())
    }
}

/// Per-level sizes of a trained bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelReport {
    pub scale: f64,
    /// Shape parameters, similarity included.
    pub n: usize,
    /// Appearance components.
    pub m: usize,
    /// Residual rows, pixels times channels.
    pub f: usize,
    pub appearance: PcaSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub shape: PcaSummary,
    pub procrustes_iterations: usize,
    pub levels: Vec<LevelReport>,
}

/// Shape model of `model` for images scaled by `f`.
pub fn scale_shape_model(model: &ShapeModel, f: f64) -> ShapeModel {
    ShapeModel {
        mean: model.mean.scaled(f),
        basis: model.basis.clone(),
        eigenvalues: &model.eigenvalues * (f * f),
        shape_noise: model.shape_noise * f * f,
    }
}

/// Rescales an image and its landmarks so that the face size equals `target`.
pub fn normalize_face(image: &Raster, shape: &Shape, target: f64) -> Result<(Raster, Shape)> {
    let size = shape.face_size();
    if !(size > 0.0) {
        return Err(AamError::Degenerate("annotation with zero face size".into()));
    }
    let g = target / size;
    Ok((image.resize(g)?, shape.scaled(g)))
}

fn check_annotations(data: &[AnnotatedImage]) -> Result<()> {
    if data.len() < 2 {
        return Err(AamError::InsufficientData(format!(
            "training needs at least two annotated images, got {}",
            data.len()
        )));
    }
    let v = data[0].shape.n_points();
    for item in data {
        if item.shape.n_points() != v {
            return Err(AamError::Input(format!(
                "{}: {} landmarks, expected {v}",
                item.name,
                item.shape.n_points()
            )));
        }
    }
    Ok(())
}

/// Trains a multi-scale bundle.
pub fn train(data: &[AnnotatedImage], config: &TrainConfig) -> Result<(AamBundle, TrainingReport)> {
    config.validate()?;
    check_annotations(data)?;

    let normalized: Vec<(Raster, Shape)> = data
        .par_iter()
        .map(|item| normalize_face(&item.image, &item.shape, config.face_size))
        .collect::<Result<_>>()?;

    let shapes: Vec<Shape> = normalized.iter().map(|(_, s)| s.clone()).collect();
    let gpa = procrustes_align(&shapes, PROCRUSTES_MAX_ITERS, PROCRUSTES_TOL)?;
    let g = config.face_size / gpa.mean.face_size();
    let aligned: Vec<Shape> = gpa.aligned.iter().map(|s| s.scaled(g)).collect();
    let (top, shape_summary) = build_shape_model(&aligned, &gpa.mean.scaled(g), config.shape_components)?;

    let k = config.extractor.channels();
    let mut levels = Vec::with_capacity(config.scales.len());
    let mut reports = Vec::with_capacity(config.scales.len());
    for &scale in &config.scales {
        let h = halvings(scale)?;
        let shape_model = scale_shape_model(&top, scale);
        let (frame, tri) = build_reference_frame(&shape_model, config.margin)?;
        let vectors: Vec<DVector<f64>> = normalized
            .par_iter()
            .map(|(image, shape)| {
                let mut img = image.clone();
                for _ in 0..h {
                    img = img.pyramid_down();
                }
                let features = config.extractor.extract(&img);
                warp_to_reference(&features, &shape.scaled(scale), &frame, &tri)
            })
            .collect::<Result<_>>()?;
        let (appearance, app_summary) = build_appearance_model(&vectors, config.appearance_components, k)?;
        let level = ScaleLevel::new(scale, shape_model, appearance, config.margin)?;
        reports.push(LevelReport {
            scale,
            n: level.shape.n_params(),
            m: level.appearance.n_components(),
            f: level.appearance.len(),
            appearance: app_summary,
        });
        levels.push(level);
    }

    let bundle = AamBundle {
        levels,
        extractor: config.extractor,
        face_size: config.face_size,
        margin: config.margin,
        training: TrainingInfo {
            n_images: data.len(),
            shape_components: config.shape_components,
            appearance_components: config.appearance_components,
        },
    };
    bundle.validate()?;
    Ok((
        bundle,
        TrainingReport {
            shape: shape_summary,
            procrustes_iterations: gpa.iterations,
            levels: reports,
        },
    ))
}
