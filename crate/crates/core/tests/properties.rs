//! Property tests over random instances: structural invariants of the
//! models, metric laws, index helpers and the tensor container.

use std::sync::OnceLock;

use proptest::prelude::*;

use kmtalk::audio::{frame_count, locate_key_frames, offset_indices, segment_long_audio, uniform_sample_indices, AudioSource};
use kmtalk::cmc::{arrangement, gated_fuse, CmcModel};
use kmtalk::container::{decode, encode, TensorRecord};
use kmtalk::eval::{fdd, interp_reconstruct, lve};
use kmtalk::lkma::{build_pseudo_complete, LkmaModel};
use kmtalk::model::ModelConfig;
use kmtalk::nn::{Graph, Mat};
use kmtalk::types::{complement, AudioFeatureSequence, KeyMotionSet, MeshSpec, MotionSequence, Phone, PhonemeAlignment};

const CASES: u32 = 200;
const V: usize = 5;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        d: 8,
        f: 8,
        pe_dim: 8,
        vertex_count: V,
        lip_vertices: vec![0, 1],
        vocab: 5,
        speakers: 0,
        seed: 11,
        ..Default::default()
    }
}

fn cmc() -> &'static CmcModel {
    static M: OnceLock<CmcModel> = OnceLock::new();
    M.get_or_init(|| CmcModel::new(tiny_config()).unwrap())
}

fn lkma() -> &'static LkmaModel {
    static M: OnceLock<LkmaModel> = OnceLock::new();
    M.get_or_init(|| LkmaModel::new(tiny_config()).unwrap())
}

fn mesh(v: usize) -> MeshSpec {
    let template = Mat::from_vec(v, 3, (0..3 * v).map(|i| i as f64 * 0.1).collect()).unwrap();
    let lips: Vec<usize> = (0..v.div_ceil(2)).collect();
    let upper: Vec<usize> = (v.div_ceil(2)..v).collect();
    MeshSpec::new("m", template, lips, if upper.is_empty() { vec![0] } else { upper }).unwrap()
}

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Mat::from_vec(rows, cols, d).unwrap())
}

/// Strictly increasing subset of `0..n` of size `m`.
fn subset(n: usize, m: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle().prop_map(move |mut v| {
        v.truncate(m);
        v.sort_unstable();
        v
    })
}

fn seq_and_keys() -> impl Strategy<Value = (Mat, Vec<usize>)> {
    (2usize..14).prop_flat_map(|n| (mat(n, 3 * V), (1..=n).prop_flat_map(move |m| subset(n, m))))
}

fn alignment_strategy() -> impl Strategy<Value = PhonemeAlignment> {
    prop::collection::vec((0.02f64..0.4, 1usize..9), 1..30).prop_map(|parts| {
        let mut t = 0.0;
        let mut phones = Vec::new();
        let mut tokens = Vec::new();
        for (d, tok) in parts {
            phones.push(Phone {
                label: format!("p{tok}"),
                start: t,
                end: t + d,
            });
            tokens.push(tok);
            t += d;
        }
        PhonemeAlignment::new(phones, tokens, t).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn pseudo_complete_of_true_keys_is_identity((frames, idx) in seq_and_keys()) {
        let gt = MotionSequence::new(frames.clone(), 25.0, "m").unwrap();
        let key = KeyMotionSet::from_sequence(&frames, &idx).unwrap();
        prop_assert_eq!(build_pseudo_complete(&gt, &key).unwrap(), gt);
    }

    #[test]
    fn pseudo_complete_touches_only_key_rows((frames, idx) in seq_and_keys(), shift in 0.5f64..2.0) {
        let gt = MotionSequence::new(frames.clone(), 25.0, "m").unwrap();
        let key = KeyMotionSet::new(idx.clone(), frames.gather_rows(&idx).unwrap().map(|x| x + shift), frames.rows()).unwrap();
        let yp = build_pseudo_complete(&gt, &key).unwrap();
        for t in 0..frames.rows() {
            let expected: Vec<f64> = if idx.contains(&t) { frames.row(t).iter().map(|x| x + shift).collect() } else { frames.row(t).to_vec() };
            prop_assert_eq!(yp.frames.row(t), &expected[..]);
        }
    }

    #[test]
    fn gated_fusion_stays_between_its_inputs(
        (a, phi, w) in (1usize..8, 1usize..6).prop_flat_map(|(n, d)| (mat(n, d), mat(n, d), mat(2 * d, d)))
    ) {
        let (g, z) = gated_fuse(&a, &phi, &w).unwrap();
        for (i, &zi) in z.data().iter().enumerate() {
            let (lo, hi) = (a.data()[i].min(phi.data()[i]), a.data()[i].max(phi.data()[i]));
            prop_assert!(zi >= lo - 1e-12 && zi <= hi + 1e-12);
            prop_assert!(g.data()[i] > 0.0 && g.data()[i] < 1.0);
        }
    }

    #[test]
    fn arrangement_is_a_permutation_placing_keys_first(
        (n, idx) in (1usize..40).prop_flat_map(|n| (Just(n), (1..=n).prop_flat_map(move |m| subset(n, m))))
    ) {
        let arr = arrangement(&idx, n).unwrap();
        let mut seen = vec![0usize; n];
        for &r in &arr {
            seen[r] += 1;
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let m = idx.len();
        prop_assert_eq!(arr.iter().filter(|&&r| r < m).count(), m);
        for (j, &i) in idx.iter().enumerate() {
            prop_assert_eq!(arr[i], j);
        }
        let others = complement(&idx, n);
        prop_assert!(others.iter().zip(others.iter().skip(1)).all(|(x, y)| arr[*x] < arr[*y]));

        // the graph scatters used by the encoder agree with the arrangement
        let rows = Mat::from_vec(n, 1, (0..n).map(|r| r as f64).collect()).unwrap();
        let mut g = Graph::detached();
        let base = g.constant(Mat::zeros(n, 1));
        let key_rows = g.constant(rows.gather_rows(&(0..m).collect::<Vec<_>>()).unwrap());
        let grid = g.scatter_rows(base, &idx, key_rows).unwrap();
        let grid = if others.is_empty() {
            grid
        } else {
            let non = g.constant(rows.gather_rows(&(m..n).collect::<Vec<_>>()).unwrap());
            g.scatter_rows(grid, &others, non).unwrap()
        };
        let placed: Vec<usize> = g.value(grid).data().iter().map(|&x| x as usize).collect();
        prop_assert_eq!(placed, arr);
    }

    #[test]
    fn completion_output_length_law(n in 2usize..16, which in 0usize..3, seed in any::<u64>()) {
        let m = match which { 0 => 1, 1 => n / 2, _ => n }.max(1);
        let mut idx: Vec<usize> = (0..n).collect();
        // deterministic pseudo-random choice of m indices
        let mut state = seed | 1;
        for i in (1..n).rev() {
            state ^= state << 13; state ^= state >> 7; state ^= state << 17;
            idx.swap(i, (state % (i as u64 + 1)) as usize);
        }
        idx.truncate(m);
        idx.sort_unstable();
        let model = cmc();
        let keys = KeyMotionSet::new(idx.clone(), Mat::filled(m, 3 * V, 0.5), n).unwrap();
        let audio = Mat::filled(n, 8, 0.1);
        let y = model.complete(&audio, &keys).unwrap();
        prop_assert_eq!(y.shape(), (n, 3 * V));
        prop_assert!(y.is_finite());
        let flow = model.encode_motion_flow(&keys).unwrap();
        prop_assert_eq!(flow.phi.rows(), n);
        prop_assert_eq!(flow.from_key.iter().filter(|&&k| k).count(), m);
        let k = lkma().predict_keys(&Mat::filled(n, 4, 0.2), None, &idx).unwrap();
        prop_assert_eq!(k.motions.shape(), (m, 3 * V));
    }

    #[test]
    fn container_round_trip(
        recs in prop::collection::vec(
            (prop::collection::vec(1usize..5, 0..4), any::<bool>(), any::<u64>()),
            0..6,
        )
    ) {
        let records: Vec<TensorRecord> = recs
            .iter()
            .enumerate()
            .map(|(i, (shape, int, seed))| {
                let len: usize = shape.iter().product();
                let name = format!("rec_{i}_{}", seed % 97);
                if *int {
                    TensorRecord::from_i64(&name, shape, (0..len).map(|k| (*seed as i64).wrapping_mul(k as i64 + 1)).collect())
                } else {
                    let data: Vec<f64> = (0..len).map(|k| ((seed.wrapping_add(k as u64) % 10_007) as f64 - 5000.0) / 7.0).collect();
                    TensorRecord::from_f64(&name, shape, &data)
                }
            })
            .collect();
        let bytes = encode(&records).unwrap();
        let back = decode(&bytes, "mem".as_ref()).unwrap();
        prop_assert_eq!(&back, &records);
        prop_assert_eq!(encode(&back).unwrap(), bytes.clone());
        if !bytes.is_empty() {
            prop_assert!(decode(&bytes[..bytes.len() - 1], "mem".as_ref()).is_err());
        }
        for r in &back {
            prop_assert_eq!(r.data.len(), r.shape.iter().product::<usize>());
        }
    }

    #[test]
    fn metrics_vanish_on_identity_and_fdd_is_antisymmetric(
        (a, b, v) in (2usize..10, 2usize..12).prop_flat_map(|(n, v)| (mat(n, 3 * v), mat(n, 3 * v), Just(v)))
    ) {
        let m = mesh(v);
        let x = MotionSequence::new(a, 25.0, "m").unwrap();
        let y = MotionSequence::new(b, 25.0, "m").unwrap();
        prop_assert_eq!(lve(&x, &x, &m).unwrap(), 0.0);
        prop_assert_eq!(fdd(&x, &x, &m).unwrap(), 0.0);
        prop_assert!(lve(&x, &y, &m).unwrap() >= 0.0);
        prop_assert_eq!(lve(&x, &y, &m).unwrap(), lve(&y, &x, &m).unwrap());
        prop_assert_eq!(fdd(&x, &y, &m).unwrap(), -fdd(&y, &x, &m).unwrap());
    }

    #[test]
    fn interpolation_passes_through_keys(
        (curve, keys) in (2usize..30).prop_flat_map(|n| (prop::collection::vec(-5.0f64..5.0, n), (1..=n).prop_flat_map(move |m| subset(n, m))))
    ) {
        let r = interp_reconstruct(&curve, &keys).unwrap();
        prop_assert_eq!(r.len(), curve.len());
        for &k in keys.iter().chain([0, curve.len() - 1].iter()) {
            prop_assert_eq!(r[k], curve[k]);
        }
        let (lo, hi) = curve.iter().fold((f64::MAX, f64::MIN), |(l, h), &c| (l.min(c), h.max(c)));
        prop_assert!(r.iter().all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12));
    }

    #[test]
    fn key_frames_are_sorted_unique_and_in_range(al in alignment_strategy(), fps in prop::sample::select(vec![25.0, 30.0, 60.0])) {
        let n = frame_count(al.duration, fps).max(1);
        let k = locate_key_frames(&al, fps, n).unwrap();
        prop_assert!(!k.is_empty());
        prop_assert!(k.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(*k.last().unwrap() < n);
        // at most one key per phone boundary
        prop_assert!(k.len() <= al.phones.len() + 1);
    }

    #[test]
    fn uniform_and_offset_indices_stay_valid(n in 1usize..200, stride in 1usize..7, delta in -3i64..4) {
        let u = uniform_sample_indices(n, stride).unwrap();
        prop_assert_eq!(u[0], 0);
        prop_assert_eq!(*u.last().unwrap(), n - 1);
        prop_assert!(u.windows(2).all(|w| w[0] < w[1] && w[1] - w[0] <= stride));
        let o = offset_indices(&u, delta, n);
        prop_assert!(o.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(o.iter().all(|&i| i < n));
    }

    #[test]
    fn segmentation_tiles_every_frame(al in alignment_strategy(), max in 0.5f64..3.0) {
        let fps = 25.0;
        let n = frame_count(al.duration, fps).max(1);
        let src = AudioSource::Precomputed(AudioFeatureSequence::new(Mat::zeros(n, 2), fps).unwrap());
        // phones longer than the limit cannot be cut without splitting them
        prop_assume!(al.phones.iter().all(|p| p.end - p.start <= max));
        let clips = segment_long_audio(&src, &al, max, fps).unwrap();
        let mut next = 0;
        for c in &clips {
            prop_assert_eq!(c.frames.start, next);
            prop_assert!(c.alignment.duration <= max + 1e-9);
            next = c.frames.end;
        }
        prop_assert_eq!(next, n);
    }
}
