use std::collections::BTreeMap;

use berrypick_core::dataset::*;
use berrypick_core::scara::{end_pose_sequence, ScaraParams};
use berrypick_core::sim::{CameraLabel, Outcome};
use proptest::prelude::*;

fn record(t: usize, seed: u64) -> EpisodeRecord {
    let px = 4 * 3 * 3;
    let f = |i: usize, c: usize| ((i * 7 + c * 3 + seed as usize) % 11) as f32 * 0.05;
    EpisodeRecord {
        meta: EpisodeMeta {
            format_version: FORMAT_VERSION,
            state_id: 1,
            seed,
            source: Source::Expert,
            outcome: Outcome::Success,
            fps: 30.0,
            cameras: vec![CameraLabel::WristUp],
            image_width: 4,
            image_height: 3,
            num_steps: t,
            extra: BTreeMap::from([("strategy".to_string(), "direct".to_string())]),
        },
        images: BTreeMap::from([(CameraLabel::WristUp, (0..t * px).map(|i| (i % 251) as u8).collect())]),
        q: (0..t).map(|i| [f(i, 0) - 0.2, f(i, 1) + 0.3, f(i, 2) * 0.1, f(i, 3) - 0.1]).collect(),
        grip: (0..t).map(|i| if i < t / 2 { 1.0 } else { 0.0 }).collect(),
        actions: (0..t).map(|i| [f(i, 4) - 0.1, f(i, 5) + 0.4, f(i, 6) * 0.1, f(i, 7), (i < t / 2) as u8 as f32]).collect(),
    }
}

#[test]
fn roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let r = record(9, 1);
    let id = write_episode(&r, dir.path()).unwrap();
    assert_eq!(read_episode(dir.path(), id).unwrap(), r);
}

#[test]
fn ids_increase() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_episode(&record(3, 1), dir.path()).unwrap();
    let b = write_episode(&record(3, 2), dir.path()).unwrap();
    assert!(b > a);
    assert_eq!(list_episodes(dir.path()).unwrap(), vec![a, b]);
}

#[test]
fn truncated_array_is_a_schema_violation() {
    let dir = tempfile::tempdir().unwrap();
    let id = write_episode(&record(5, 1), dir.path()).unwrap();
    let path = episode_dir(dir.path(), id).join("actions.bin");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(read_episode(dir.path(), id), Err(DatasetError::SchemaViolation { .. })));
}

#[test]
fn invalid_records_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = record(5, 1);
    r.grip.pop();
    assert!(write_episode(&r, dir.path()).is_err());
    let mut r = record(1, 1);
    r.meta.num_steps = 1;
    assert!(r.validate().is_err());
    let mut r = record(4, 1);
    r.actions[2][0] = f32::NAN;
    assert!(r.validate().is_err());
}

fn arm() -> ScaraParams<f64> {
    ScaraParams::default()
}

#[test]
fn constant_actions_floor_std() {
    let mut r = record(6, 1);
    for a in &mut r.actions {
        *a = [0.1, 0.2, 0.05, 0.0, 1.0];
    }
    let s = NormStats::from_records(&[&r], &arm(), PoseSource::Action).unwrap();
    assert_eq!(&s.action_std[..4], &[STD_FLOOR; 4]);
    assert_eq!((s.action_mean[4], s.action_std[4]), (0.0, 1.0));
}

#[test]
fn binary_q_has_half_mean() {
    let mut r = record(10, 1);
    for (i, q) in r.q.iter_mut().enumerate() {
        *q = [(i % 2) as f32; 4];
    }
    let s = NormStats::from_records(&[&r], &arm(), PoseSource::Action).unwrap();
    assert_eq!(s.q_mean, [0.5; 4]);
    assert!((s.q_std[0] - 0.5).abs() < 1e-12);
}

#[test]
fn stats_ignore_episode_order() {
    let (a, b, c) = (record(7, 1), record(12, 2), record(5, 3));
    let s1 = NormStats::from_records(&[&a, &b, &c], &arm(), PoseSource::Action).unwrap();
    let s2 = NormStats::from_records(&[&c, &a, &b], &arm(), PoseSource::Action).unwrap();
    assert_eq!(s1, s2);
}

#[test]
fn chunk_boundaries() {
    let r = record(8, 1);
    let s = NormStats::from_records(&[&r], &arm(), PoseSource::Action).unwrap();
    let cams = [CameraLabel::WristUp];
    let end = sample_chunk(&r, 7, 5, &cams, &s, &arm()).unwrap();
    assert_eq!(end.pad_mask, vec![false, true, true, true, true]);
    assert!(end.actions[1..].iter().all(|a| *a == end.actions[0]));
    let start = sample_chunk(&r, 0, 8, &cams, &s, &arm()).unwrap();
    assert!(start.pad_mask.iter().all(|p| !p));
    assert_eq!(start.images[0].1.len(), 4 * 3 * 3);
    assert!(matches!(sample_chunk(&r, 8, 5, &cams, &s, &arm()), Err(DatasetError::BadIndex { .. })));
    assert!(sample_chunk(&r, 0, 5, &[CameraLabel::WristDown], &s, &arm()).is_err());
}

#[test]
fn split_counts_and_determinism() {
    let ids: Vec<u64> = (0..200).collect();
    let (train, val) = split_ids(&ids, 6, 3).unwrap();
    assert_eq!((train.len(), val.len()), (194, 6));
    assert_eq!(split_ids(&ids, 6, 3).unwrap(), (train.clone(), val.clone()));
    let mut all: Vec<u64> = train.iter().chain(&val).copied().collect();
    all.sort();
    assert_eq!(all, ids);
    assert!(val.iter().all(|v| !train.contains(v)));
    assert!(split_ids(&ids[..3], 6, 0).is_err());
}

#[test]
fn filter_by_state_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = record(3, 1);
    let a = write_episode(&r, dir.path()).unwrap();
    r.meta.state_id = 4;
    let b = write_episode(&r, dir.path()).unwrap();
    let ids = list_episodes(dir.path()).unwrap();
    assert_eq!(filter_by_state(dir.path(), &ids, &[4]).unwrap(), vec![b]);
    assert_eq!(filter_by_state(dir.path(), &ids, &[1, 4]).unwrap(), vec![a, b]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn chunk_matches_raw_slice_and_fk(len in 2usize..20, t_frac in 0.0f64..1.0, k in 1usize..12, seed in 0u64..50) {
        let r = record(len, seed);
        let t = ((len - 1) as f64 * t_frac) as usize;
        let s = NormStats::from_records(&[&r], &arm(), PoseSource::Action).unwrap();
        let c = sample_chunk(&r, t, k, &[CameraLabel::WristUp], &s, &arm()).unwrap();
        // Monotone padding.
        let first_pad = c.pad_mask.iter().position(|p| *p).unwrap_or(k);
        prop_assert!(c.pad_mask[first_pad..].iter().all(|p| *p));
        prop_assert_eq!(first_pad, k.min(len - t));
        for i in 0..first_pad {
            let raw = r.actions[t + i].map(f64::from);
            let back = s.denorm_action(c.actions[i]);
            for (x, y) in raw.iter().zip(&back) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
        let joints: Vec<[f64; 4]> = (0..k).map(|i| {
            let a = r.actions[(t + i).min(len - 1)].map(f64::from);
            [a[0], a[1], a[2], a[3]]
        }).collect();
        let oracle = end_pose_sequence(&joints, &arm());
        for (p, o) in c.end_poses.iter().zip(&oracle) {
            let back = s.denorm_pose(*p);
            for (x, y) in back.iter().zip(o.to_array()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normalization_roundtrip(a in prop::array::uniform5(-5.0f64..5.0), seed in 0u64..20) {
        let r = record(6, seed);
        let s = NormStats::from_records(&[&r], &arm(), PoseSource::Measured).unwrap();
        let back = s.denorm_action(s.norm_action(a));
        for (x, y) in a.iter().zip(&back) {
            prop_assert!((x - y).abs() < 1e-6);
        }
        let q = [a[0], a[1], a[2], a[3]];
        let nq = s.norm_q(q);
        let back: [f64; 4] = std::array::from_fn(|i| nq[i] * s.q_std[i] + s.q_mean[i]);
        for (x, y) in q.iter().zip(&back) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }
}
