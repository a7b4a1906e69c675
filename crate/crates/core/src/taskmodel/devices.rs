use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{parse_document, CttNode, Modality, TaskModelError};

/// Cover search enumerates every subset, so referentials stay small.
pub const MAX_REFERENTIAL_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct DeviceDescriptor {
    pub device_id: String,
    pub provides: BTreeSet<Modality>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub exclusive_with: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct DeviceConfiguration {
    /// Device ids, sorted.
    pub devices: Vec<String>,
    pub covered_needs: BTreeSet<Modality>,
}

pub fn load_referential(document: &str) -> Result<Vec<DeviceDescriptor>, TaskModelError> {
    let referential: Vec<DeviceDescriptor> = parse_document(document)?;
    check_referential(&referential)?;
    Ok(referential)
}

fn check_referential(referential: &[DeviceDescriptor]) -> Result<(), TaskModelError> {
    let invalid = |msg: String| Err(TaskModelError::InvalidReferential(msg));
    if referential.len() > MAX_REFERENTIAL_SIZE {
        return invalid(format!("{} devices, at most {MAX_REFERENTIAL_SIZE} supported", referential.len()));
    }
    let mut ids = BTreeSet::new();
    for device in referential {
        if device.provides.is_empty() {
            return invalid(format!("`{}` provides nothing", device.device_id));
        }
        if !ids.insert(device.device_id.as_str()) {
            return invalid(format!("duplicate device id `{}`", device.device_id));
        }
    }
    Ok(())
}

/// All minimal conflict-free device sets covering the tree's needs, smallest
/// first, ties broken by the sorted device ids.
pub fn derive_configurations(
    tree: &CttNode,
    referential: &[DeviceDescriptor],
) -> Result<Vec<DeviceConfiguration>, TaskModelError> {
    derive_for_needs(&tree.required_needs(), referential)
}

pub fn derive_for_needs(
    needs: &BTreeSet<Modality>,
    referential: &[DeviceDescriptor],
) -> Result<Vec<DeviceConfiguration>, TaskModelError> {
    check_referential(referential)?;
    for need in needs {
        if !referential.iter().any(|d| d.provides.contains(need)) {
            return Err(TaskModelError::UncoverableNeed(*need));
        }
    }

    let n = referential.len();
    let position: HashMap<&str, usize> =
        referential.iter().enumerate().map(|(i, d)| (d.device_id.as_str(), i)).collect();
    let mut conflicts = vec![0u32; n];
    for (i, device) in referential.iter().enumerate() {
        for other in &device.exclusive_with {
            if let Some(&j) = position.get(other.as_str()) {
                conflicts[i] |= 1 << j;
                conflicts[j] |= 1 << i;
            }
        }
    }

    let need_bits = |set: &BTreeSet<Modality>| -> u32 {
        set.iter().map(|m| 1u32 << Modality::ALL.iter().position(|x| x == m).expect("known modality")).fold(0, |a, b| a | b)
    };
    let wanted = need_bits(needs);
    let provides: Vec<u32> = referential.iter().map(|d| need_bits(&d.provides)).collect();
    let covered = |mask: u32| -> u32 {
        (0..n).filter(|i| mask & (1 << i) != 0).fold(0, |acc, i| acc | provides[i])
    };
    let covers = |mask: u32| covered(mask) & wanted == wanted;

    let mut found = Vec::new();
    for mask in 0u32..(1u32 << n) {
        let conflict_free = (0..n).all(|i| mask & (1 << i) == 0 || conflicts[i] & mask == 0);
        if !conflict_free || !covers(mask) {
            continue;
        }
        let minimal = (0..n).filter(|i| mask & (1 << i) != 0).all(|i| !covers(mask & !(1 << i)));
        if !minimal {
            continue;
        }
        let mut devices: Vec<String> =
            (0..n).filter(|i| mask & (1 << i) != 0).map(|i| referential[i].device_id.clone()).collect();
        devices.sort();
        let covered_needs = (0..n)
            .filter(|i| mask & (1 << i) != 0)
            .flat_map(|i| referential[i].provides.iter().copied())
            .collect();
        found.push(DeviceConfiguration { devices, covered_needs });
    }
    found.sort_by(|a, b| (a.devices.len(), &a.devices).cmp(&(b.devices.len(), &b.devices)));
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn device(id: &str, provides: &[Modality], exclusive: &[&str]) -> DeviceDescriptor {
        DeviceDescriptor {
            device_id: id.into(),
            provides: provides.iter().copied().collect(),
            exclusive_with: exclusive.iter().map(|s| s.to_string()).collect(),
            description: String::new(),
        }
    }

    #[test]
    fn empty_needs_yield_empty_configuration() {
        let referential = vec![device("a", &[Modality::VisualOut], &[])];
        let configs = derive_for_needs(&BTreeSet::new(), &referential).unwrap();
        assert_eq!(configs, vec![DeviceConfiguration { devices: vec![], covered_needs: BTreeSet::new() }]);
    }

    #[test]
    fn uncoverable_need_is_named() {
        let referential = vec![device("a", &[Modality::VisualOut], &[])];
        let needs = BTreeSet::from([Modality::VisualOut, Modality::TextIn]);
        assert_eq!(derive_for_needs(&needs, &referential).unwrap_err(), TaskModelError::UncoverableNeed(Modality::TextIn));
    }

    #[test]
    fn exclusive_devices_never_combine() {
        let referential = vec![
            device("hmd-a", &[Modality::VisualOut, Modality::AudioOut], &["hmd-b"]),
            device("hmd-b", &[Modality::VisualOut, Modality::TagIn], &[]),
            device("reader", &[Modality::TagIn], &[]),
        ];
        let needs = BTreeSet::from([Modality::VisualOut, Modality::AudioOut, Modality::TagIn]);
        let configs = derive_for_needs(&needs, &referential).unwrap();
        let sets: Vec<_> = configs.iter().map(|c| c.devices.clone()).collect();
        assert_eq!(sets, vec![vec!["hmd-a".to_string(), "reader".to_string()]]);
    }

    #[test]
    fn ordering_by_size_then_ids() {
        let referential = vec![
            device("z-all", &[Modality::VisualOut, Modality::TagIn], &[]),
            device("b-vis", &[Modality::VisualOut], &[]),
            device("a-tag", &[Modality::TagIn], &[]),
        ];
        let needs = BTreeSet::from([Modality::VisualOut, Modality::TagIn]);
        let configs = derive_for_needs(&needs, &referential).unwrap();
        let sets: Vec<_> = configs.iter().map(|c| c.devices.join("+")).collect();
        assert_eq!(sets, vec!["z-all", "a-tag+b-vis"]);
    }

    #[test]
    fn referential_checks() {
        assert!(load_referential(r#"[{"device-id": "x", "provides": []}]"#).is_err());
        assert!(load_referential(
            r#"[{"device-id": "x", "provides": ["TagIn"]}, {"device-id": "x", "provides": ["TagIn"]}]"#
        )
        .is_err());
        let many: Vec<_> = (0..=MAX_REFERENTIAL_SIZE).map(|i| device(&format!("d{i}"), &[Modality::TagIn], &[])).collect();
        assert!(derive_for_needs(&BTreeSet::new(), &many).is_err());
    }
}
