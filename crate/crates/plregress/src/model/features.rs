//! Per-image feature sets: the model inputs.

use ndarray::s;
use thiserror::Error;

use crate::geometry::{LineSegment2, LineSegment3, Point2, Point3};
use crate::tensor::Arr;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureSetError {
    #[error("descriptor {index} has norm {norm} (must be unit within 1e-6)")]
    NotUnitNorm { index: usize, norm: f64 },
    #[error("descriptor {index} has width {got}, expected {expected}")]
    WrongDescriptorWidth {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("line {index} carries {got} sampled descriptors, expected {expected}")]
    WrongTokenCount {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("feature {index}: 3D ground truth and reliability flag disagree")]
    ReliabilityMismatch { index: usize },
}

#[derive(Debug, Clone)]
pub struct PointFeature {
    pub descriptor: Vec<f64>,
    pub location: Point2,
    pub gt3d: Option<Point3>,
    pub reliable: bool,
}

#[derive(Debug, Clone)]
pub struct LineFeature {
    /// C sampled descriptors, one per row.
    pub descriptors: Arr,
    pub segment: LineSegment2,
    pub gt3d: Option<LineSegment3>,
    pub reliable: bool,
}

/// Unordered per-image sets of point and line detections.
#[derive(Debug, Clone, Default)]
pub struct FeatureSet {
    pub points: Vec<PointFeature>,
    pub lines: Vec<LineFeature>,
}

fn check_unit(v: impl Iterator<Item = f64>, index: usize) -> Result<(), FeatureSetError> {
    let norm = v.map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(FeatureSetError::NotUnitNorm { index, norm });
    }
    Ok(())
}

impl FeatureSet {
    /// Checks the structural invariants: unit-norm descriptors of the right
    /// width, C tokens per line, and `gt3d present ⇔ reliable`.
    pub fn validate(&self, descriptor_dim: usize, tokens: usize) -> Result<(), FeatureSetError> {
        for (i, p) in self.points.iter().enumerate() {
            if p.descriptor.len() != descriptor_dim {
                return Err(FeatureSetError::WrongDescriptorWidth {
                    index: i,
                    got: p.descriptor.len(),
                    expected: descriptor_dim,
                });
            }
            check_unit(p.descriptor.iter().copied(), i)?;
            if p.gt3d.is_some() != p.reliable {
                return Err(FeatureSetError::ReliabilityMismatch { index: i });
            }
        }
        for (i, l) in self.lines.iter().enumerate() {
            if l.descriptors.nrows() != tokens {
                return Err(FeatureSetError::WrongTokenCount {
                    index: i,
                    got: l.descriptors.nrows(),
                    expected: tokens,
                });
            }
            if l.descriptors.ncols() != descriptor_dim {
                return Err(FeatureSetError::WrongDescriptorWidth {
                    index: i,
                    got: l.descriptors.ncols(),
                    expected: descriptor_dim,
                });
            }
            for row in l.descriptors.rows() {
                check_unit(row.iter().copied(), i)?;
            }
            if l.gt3d.is_some() != l.reliable {
                return Err(FeatureSetError::ReliabilityMismatch { index: i });
            }
        }
        Ok(())
    }

    /// All point descriptors as an n×dim matrix.
    pub fn point_descriptor_matrix(&self, descriptor_dim: usize) -> Arr {
        let mut m = Arr::zeros((self.points.len(), descriptor_dim));
        for (i, p) in self.points.iter().enumerate() {
            for (j, &x) in p.descriptor.iter().enumerate() {
                m[(i, j)] = x;
            }
        }
        m
    }

    /// All line tokens stacked into an (N·C)×dim matrix, line-major.
    pub fn line_token_matrix(&self, descriptor_dim: usize, tokens: usize) -> Arr {
        let mut m = Arr::zeros((self.lines.len() * tokens, descriptor_dim));
        for (i, l) in self.lines.iter().enumerate() {
            m.slice_mut(s![i * tokens..(i + 1) * tokens, ..])
                .assign(&l.descriptors);
        }
        m
    }

    pub fn point_reliability(&self) -> Vec<bool> {
        self.points.iter().map(|p| p.reliable).collect()
    }

    pub fn line_reliability(&self) -> Vec<bool> {
        self.lines.iter().map(|l| l.reliable).collect()
    }
}
