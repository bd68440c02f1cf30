//! Vector sketch synthesis by optimizing cubic Bezier strokes through a
//! differentiable rasterizer, guided by a diffusion critic.
//!
//! The critic (latent encoder, noise predictor, attention maps, feature
//! extractor) sits behind the [`critic::Critic`] trait: [`critic::ToyCritic`]
//! is an analytic in-process double, [`critic_client::HttpCritic`] talks to a
//! model server over HTTP.

pub mod augment;
pub mod cli;
pub mod config;
pub mod critic;
pub mod critic_client;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod guidance;
pub mod init;
pub mod io;
pub mod perceptual;
pub mod pipeline;
pub mod raster;
pub mod schedule;
pub mod svg;
pub mod tensor;

pub use error::{CriticError, Error, Result};
pub use geometry::{ControlPoint, SketchParams, Stroke};
pub use raster::{render, render_backward, render_partial, ParamGrad, RasterConfig, Rasterizer};
pub use tensor::{RasterImage, Tensor};
