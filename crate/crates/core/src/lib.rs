//! Query-based point cloud feature pipeline.
//!
//! An input cloud is encoded once by an interchangeable backbone into
//! support points with features; a querying network then synthesizes a
//! feature vector for *any* 3D position by cross-attending from the query
//! position into the support set; task heads consume those query features.
//! Everything trains end to end on a from-scratch reverse-mode tape.

pub mod numerics;
