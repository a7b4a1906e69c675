use std::collections::BTreeSet;

use hmtd_core::taskmodel::{
    continuity_score, derive_for_needs, validate_irvo, Arrow, Channel, DeviceDescriptor, Entity, EntityKind,
    FusionFrame, IrvoModel, Modality,
};
use proptest::prelude::*;
use proptest::sample::subsequence;

const PERCEIVABLE: [EntityKind; 4] =
    [EntityKind::RealTool, EntityKind::RealObject, EntityKind::VirtualTool, EntityKind::VirtualObject];

fn entity(id: String, kind: EntityKind) -> Entity {
    Entity { id, kind, label: String::new() }
}

fn is_virtual(kind: EntityKind) -> bool {
    matches!(kind, EntityKind::VirtualTool | EntityKind::VirtualObject)
}

/// Valid single-user model: `kinds[i]` is entity `e{i}`, `perceived[i]`
/// says whether it has a perceptual arrow to the user, `frames` groups
/// entity indices.
fn build(kinds: &[EntityKind], perceived: &[bool], frames: &[Vec<usize>]) -> IrvoModel {
    let mut entities = vec![
        entity("U".into(), EntityKind::User),
        entity("S".into(), EntityKind::Sensor),
        entity("F".into(), EntityKind::Effector),
    ];
    let mut arrows = vec![
        Arrow { from: "U".into(), to: "S".into(), channel: Channel::Action, via: None },
        Arrow { from: "S".into(), to: "e0".into(), channel: Channel::Data, via: None },
    ];
    for (i, kind) in kinds.iter().enumerate() {
        let id = format!("e{i}");
        entities.push(entity(id.clone(), *kind));
        if perceived[i] {
            let channel = if i % 3 == 0 { Channel::Audio } else { Channel::Visual };
            let via = is_virtual(*kind).then(|| "F".to_string());
            arrows.push(Arrow { from: id.clone(), to: "U".into(), channel, via });
        }
        arrows.push(Arrow { from: "U".into(), to: id, channel: Channel::Action, via: is_virtual(*kind).then(|| "S".into()) });
    }
    if !is_virtual(kinds[0]) {
        arrows.remove(1);
    }
    let fusion_frames = frames
        .iter()
        .map(|members| FusionFrame { id: None, members: members.iter().map(|i| format!("e{i}")).collect() })
        .collect();
    IrvoModel { entities, arrows, fusion_frames }
}

/// Random partition of some entities into disjoint frames of two or more.
fn model_parts() -> impl Strategy<Value = (Vec<EntityKind>, Vec<bool>, Vec<Vec<usize>>)> {
    (2usize..9).prop_flat_map(|n| {
        (
            proptest::collection::vec(proptest::sample::select(PERCEIVABLE.to_vec()), n),
            proptest::collection::vec(any::<bool>(), n),
            proptest::collection::vec(0usize..4, n),
        )
            .prop_map(|(kinds, perceived, group)| {
                let mut frames: Vec<Vec<usize>> = (1..4)
                    .map(|g| (0..group.len()).filter(|&i| group[i] == g).collect::<Vec<_>>())
                    .filter(|f| f.len() >= 2)
                    .collect();
                frames.sort();
                (kinds, perceived, frames)
            })
    })
}

/// Perceived sources counted by hand: each frame with a perceived member
/// once, each perceived unframed entity once.
fn oracle_score(perceived: &[bool], frames: &[Vec<usize>]) -> usize {
    let framed: BTreeSet<usize> = frames.iter().flatten().copied().collect();
    let frame_sources = frames.iter().filter(|f| f.iter().any(|&i| perceived[i])).count();
    let loose = (0..perceived.len()).filter(|i| perceived[*i] && !framed.contains(i)).count();
    frame_sources + loose
}

/// The distinct perceived sources: a frame index or a loose entity index.
fn sources(perceived: &[bool], frames: &[Vec<usize>]) -> Vec<(Option<usize>, usize)> {
    let framed: BTreeSet<usize> = frames.iter().flatten().copied().collect();
    let mut out: Vec<(Option<usize>, usize)> = frames
        .iter()
        .enumerate()
        .filter(|(_, f)| f.iter().any(|&i| perceived[i]))
        .map(|(k, f)| (Some(k), f[0]))
        .collect();
    out.extend((0..perceived.len()).filter(|i| perceived[*i] && !framed.contains(i)).map(|i| (None, i)));
    out
}

fn merge(frames: &[Vec<usize>], a: (Option<usize>, usize), b: (Option<usize>, usize)) -> Vec<Vec<usize>> {
    let members = |s: (Option<usize>, usize)| match s.0 {
        Some(k) => frames[k].clone(),
        None => vec![s.1],
    };
    let mut merged = members(a);
    merged.extend(members(b));
    let mut out: Vec<Vec<usize>> =
        frames.iter().enumerate().filter(|(k, _)| Some(*k) != a.0 && Some(*k) != b.0).map(|(_, f)| f.clone()).collect();
    out.push(merged);
    out
}

proptest! {
    #[test]
    fn generated_models_are_valid_and_match_oracle((kinds, perceived, frames) in model_parts()) {
        let model = build(&kinds, &perceived, &frames);
        prop_assert_eq!(validate_irvo(&model), vec![]);
        prop_assert_eq!(continuity_score(&model).unwrap(), oracle_score(&perceived, &frames));
    }

    #[test]
    fn fusing_two_sources_lowers_score_by_one((kinds, perceived, frames) in model_parts(), pick in any::<(usize, usize)>()) {
        let found = sources(&perceived, &frames);
        prop_assume!(found.len() >= 2);
        let a = pick.0 % found.len();
        let b = (a + 1 + pick.1 % (found.len() - 1)) % found.len();
        let before = continuity_score(&build(&kinds, &perceived, &frames)).unwrap();
        let fused = merge(&frames, found[a], found[b]);
        let after = continuity_score(&build(&kinds, &perceived, &fused)).unwrap();
        prop_assert_eq!(after + 1, before);
    }

    #[test]
    fn score_ignores_labels_and_order((kinds, perceived, frames) in model_parts(), seed in any::<u64>()) {
        let model = build(&kinds, &perceived, &frames);
        let rename = |id: &str| format!("node-{}", id.chars().rev().collect::<String>());
        let mut relabeled = IrvoModel {
            entities: model.entities.iter().map(|e| entity(rename(&e.id), e.kind)).collect(),
            arrows: model
                .arrows
                .iter()
                .map(|a| Arrow { from: rename(&a.from), to: rename(&a.to), channel: a.channel, via: a.via.as_deref().map(rename) })
                .collect(),
            fusion_frames: model
                .fusion_frames
                .iter()
                .map(|f| FusionFrame { id: None, members: f.members.iter().rev().map(|m| rename(m)).collect() })
                .collect(),
        };
        let n = relabeled.arrows.len();
        relabeled.arrows.rotate_left(seed as usize % n);
        if seed & 1 == 1 {
            relabeled.arrows.reverse();
            relabeled.entities.reverse();
            relabeled.fusion_frames.reverse();
        }
        prop_assert_eq!(continuity_score(&relabeled).unwrap(), continuity_score(&model).unwrap());
    }
}

fn referential() -> impl Strategy<Value = Vec<DeviceDescriptor>> {
    (1usize..=8).prop_flat_map(|n| {
        proptest::collection::vec(
            (subsequence(Modality::ALL.to_vec(), 1..=3), proptest::collection::vec(0usize..n, 0..2)),
            n,
        )
        .prop_map(|devices| {
            devices
                .into_iter()
                .enumerate()
                .map(|(i, (provides, exclusive))| DeviceDescriptor {
                    device_id: format!("d{i}"),
                    provides: provides.into_iter().collect(),
                    exclusive_with: exclusive.into_iter().filter(|&j| j != i).map(|j| format!("d{j}")).collect(),
                    description: String::new(),
                })
                .collect()
        })
    })
}

fn covers(referential: &[DeviceDescriptor], chosen: &[usize], needs: &BTreeSet<Modality>) -> bool {
    let provided: BTreeSet<Modality> = chosen.iter().flat_map(|&i| referential[i].provides.iter().copied()).collect();
    needs.is_subset(&provided)
}

fn conflict_free(referential: &[DeviceDescriptor], chosen: &[usize]) -> bool {
    chosen.iter().all(|&i| {
        chosen.iter().all(|&j| {
            !referential[i].exclusive_with.contains(&referential[j].device_id)
                && !referential[j].exclusive_with.contains(&referential[i].device_id)
        })
    })
}

proptest! {
    #[test]
    fn derivation_matches_brute_force(referential in referential(), needs in subsequence(Modality::ALL.to_vec(), 0..=4)) {
        let needs: BTreeSet<Modality> = needs.into_iter().collect();
        let n = referential.len();
        let subsets: Vec<Vec<usize>> = (0u32..1 << n).map(|m| (0..n).filter(|i| m & (1 << i) != 0).collect()).collect();
        let good = |s: &Vec<usize>| conflict_free(&referential, s) && covers(&referential, s, &needs);
        let mut oracle: Vec<Vec<String>> = subsets
            .iter()
            .filter(|s| good(s))
            .filter(|s| !subsets.iter().any(|t| t.len() < s.len() && t.iter().all(|x| s.contains(x)) && covers(&referential, t, &needs)))
            .map(|s| s.iter().map(|&i| referential[i].device_id.clone()).collect())
            .collect();
        oracle.sort_by(|a, b| (a.len(), a).cmp(&(b.len(), b)));

        match derive_for_needs(&needs, &referential) {
            Ok(found) => {
                let ids: Vec<Vec<String>> = found.iter().map(|c| c.devices.clone()).collect();
                prop_assert_eq!(&ids, &oracle);
                for config in &found {
                    let chosen: Vec<usize> = config.devices.iter().map(|d| d[1..].parse().unwrap()).collect();
                    prop_assert!(covers(&referential, &chosen, &needs));
                    for drop in 0..chosen.len() {
                        let mut fewer = chosen.clone();
                        fewer.remove(drop);
                        prop_assert!(!covers(&referential, &fewer, &needs));
                    }
                }
            }
            Err(_) => {
                let provided: BTreeSet<Modality> = referential.iter().flat_map(|d| d.provides.iter().copied()).collect();
                prop_assert!(!needs.is_subset(&provided));
            }
        }
    }
}
