//! Long-document multi-label classification on block sequences.
//!
//! Documents are split into fixed-length character blocks, embedded block by
//! block through a pluggable backend, and classified by a multi-head model in
//! which every label owns a detachable head (Bi-LSTM or banded-attention).
//! Heads train independently under a weighted binary cross-entropy loss, so
//! labels can be added, removed, or fine-tuned without disturbing the rest.
//! Prefix (time-truncated) predictions localize which blocks trigger which
//! label.
//!
//! This crate is the `no_std + alloc` computational core: tensors, the
//! reverse-mode tape, both head architectures, model assembly/serialization,
//! training, and explanation matrices. File IO, the CLI, dataset loaders, and
//! the remote embedding client live in the companion `hydradoc` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attention;
pub mod bilstm;
pub mod blocking;
pub mod codec;
pub mod corpus;
pub mod embed;
pub mod explain;
pub mod model;
pub mod params;
pub mod tape;
pub mod train;
pub mod tensor;
