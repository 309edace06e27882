//! Property tests for the core invariants.

use proptest::prelude::*;

use hydradoc_core::attention::{band_mask, AttentionWindow};
use hydradoc_core::blocking::{apply_mask, mask_matrix, segment, BlockingConfig};
use hydradoc_core::embed::{embed_blocks, hash_embed, EmbeddingBackend, FeatureMatrix, HashingBackend};

proptest! {
    #[test]
    fn segmentation_is_deterministic_and_resegments(
        text in ".{0,400}",
        s_b in 1usize..40,
        extra in 0usize..200,
    ) {
        let cfg = BlockingConfig::new(s_b, s_b * (1 + extra / s_b.max(1)).max(1) + extra).unwrap();
        let a = segment(&text, &cfg);
        let b = segment(&text, &cfg);
        prop_assert_eq!(&a, &b);

        // Re-segmenting the concatenation of the kept blocks reproduces them.
        let joined: String = a.blocks().concat();
        let again = segment(&joined, &cfg);
        prop_assert_eq!(&a, &again);
    }

    #[test]
    fn mask_count_matches_ceil_formula(
        text in ".{0,300}",
        s_b in 1usize..25,
        l_mult in 1usize..8,
    ) {
        let l = s_b * l_mult;
        let cfg = BlockingConfig::new(s_b, l).unwrap();
        let doc = segment(&text, &cfg);
        let chars = text.chars().count().min(l);
        let expected = chars.div_ceil(s_b);
        prop_assert_eq!(doc.real_blocks(), expected);
        // Non-empty blocks form a prefix.
        let n = doc.real_blocks();
        prop_assert!(doc.mask()[..n].iter().all(|&m| m));
        prop_assert!(!doc.mask()[n..].iter().any(|&m| m));
        // Every kept block except the last is exactly s_b chars.
        for b in doc.blocks().iter().take(n.saturating_sub(1)) {
            prop_assert_eq!(b.chars().count(), s_b);
        }
    }

    #[test]
    fn apply_mask_is_idempotent(
        rows in 1usize..6,
        cols in 1usize..6,
        values in proptest::collection::vec(-1e3f32..1e3, 36),
        mask_bits in proptest::collection::vec(any::<bool>(), 6),
    ) {
        let x = FeatureMatrix::from_vec(rows, cols, values[..rows * cols].to_vec());
        let mask_data: Vec<f32> = (0..rows)
            .flat_map(|r| core::iter::repeat(if mask_bits[r] { 1.0 } else { 0.0 }).take(cols))
            .collect();
        let m = FeatureMatrix::from_vec(rows, cols, mask_data);
        let once = apply_mask(&x, &m).unwrap();
        let twice = apply_mask(&once, &m).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn hash_embed_is_always_unit_norm(text in ".{0,200}", n_d in 2usize..300, seed in any::<u64>()) {
        let v = hash_embed(&text, n_d, seed);
        prop_assert_eq!(v.len(), n_d);
        let norm: f64 = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-6, "norm {}", norm);
    }

    #[test]
    fn embedding_rows_depend_on_text_not_position(
        a in "[a-z ]{1,30}",
        b in "[a-z ]{1,30}",
    ) {
        // The same block text placed at different positions embeds equally.
        let backend = HashingBackend::new(32, 1);
        let cfg = BlockingConfig::new(32, 96).unwrap();
        let doc_ab = segment(&format!("{a:<32}{b:<32}"), &cfg);
        let doc_ba = segment(&format!("{b:<32}{a:<32}"), &cfg);
        let m_ab = embed_blocks(&doc_ab, &backend, None).unwrap();
        let m_ba = embed_blocks(&doc_ba, &backend, None).unwrap();
        prop_assert_eq!(m_ab.row(0), m_ba.row(1));
        prop_assert_eq!(m_ab.row(1), m_ba.row(0));
    }

    #[test]
    fn band_masks_grow_monotonically(n in 1usize..12, tau in 0usize..12) {
        let narrow = band_mask(n, AttentionWindow::Banded(tau));
        let wide = band_mask(n, AttentionWindow::Banded(tau + 1));
        let global = band_mask(n, AttentionWindow::Global);
        for i in 0..n {
            for j in 0..n {
                prop_assert!(narrow.get(i, j) <= wide.get(i, j));
                prop_assert!(wide.get(i, j) <= global.get(i, j));
            }
            // Diagonal is always visible.
            prop_assert_eq!(narrow.get(i, i), 1.0);
        }
    }

    #[test]
    fn mask_matrix_rows_are_uniform(text in ".{0,100}", n_d in 1usize..8) {
        let cfg = BlockingConfig::new(7, 70).unwrap();
        let doc = segment(&text, &cfg);
        let m = mask_matrix(&doc, n_d);
        for (i, &bit) in doc.mask().iter().enumerate() {
            let expected = if bit { 1.0f32 } else { 0.0 };
            prop_assert!(m.row(i).iter().all(|&v| v == expected));
        }
    }

    #[test]
    fn backend_round_trips_through_its_id(dim in 2usize..600, seed in any::<u64>()) {
        let backend = HashingBackend::new(dim, seed);
        let parsed = HashingBackend::from_backend_id(&backend.backend_id()).unwrap();
        prop_assert_eq!(parsed.dim(), dim);
        prop_assert_eq!(parsed.seed(), seed);
    }
}
