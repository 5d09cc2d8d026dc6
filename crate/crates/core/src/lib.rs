//! Duct-level features and interpretable classification of breast biopsy ROIs.
//!
//! A region of interest arrives as a raster of tissue labels plus optional
//! duct bounding boxes. [`instances`] turns those into a map of duct
//! instances, [`features`] measures tissue composition and co-occurrence at
//! ROI, box and mask level, [`learn`] trains and evaluates random forests, and
//! [`explain`] attributes their predictions with exact Shapley values.
//! [`synth`] generates labelled datasets for testing the whole pipeline.

pub mod explain;
pub mod features;
pub mod instances;
pub mod learn;
pub mod raster;
pub mod synth;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/rasters.md")]
    mod rasters {}
    #[doc = include_str!("../../../book/src/instances.md")]
    mod instances {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/learning.md")]
    mod learning {}
    #[doc = include_str!("../../../book/src/explanations.md")]
    mod explanations {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
