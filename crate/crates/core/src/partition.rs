//! Non-IID splits of a dataset across devices.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Scheme {
    /// Per-class device proportions drawn from `Dir(alpha · 1_N)`.
    Dirichlet { alpha: f64 },
    /// Every device holds exactly `classes_per_device` classes.
    Pathological { classes_per_device: usize },
    /// Uniform random split with near-equal shard sizes.
    Iid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// `assignments[i]` lists device `i`'s dataset indices in ascending order.
    pub assignments: Vec<Vec<usize>>,
    pub scheme: Scheme,
    pub seed: u64,
}

impl Partition {
    pub fn num_devices(&self) -> usize {
        self.assignments.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    /// Per-device label histograms.
    pub fn label_histograms(&self, dataset: &Dataset) -> Vec<Vec<usize>> {
        self.assignments
            .iter()
            .map(|idx| {
                let mut h = vec![0; dataset.num_classes()];
                for &i in idx {
                    h[dataset.labels()[i]] += 1;
                }
                h
            })
            .collect()
    }

    /// Checks disjointness, exact coverage of `0..n` and nonempty devices.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (d, idx) in self.assignments.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::invalid(format!("device {d} received no samples")));
            }
            for &i in idx {
                if i >= n {
                    return Err(Error::invalid(format!("device {d}: index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::invalid(format!("index {i} assigned twice")));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("index {missing} is not assigned to any device")));
        }
        Ok(())
    }

    /// JSON object mapping device id (as a string key) to its index list.
    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        let map: BTreeMap<usize, &Vec<usize>> = self.assignments.iter().enumerate().collect();
        serde_json::to_writer(writer, &map)?;
        Ok(())
    }

    pub fn read_assignments_json<R: Read>(reader: R) -> Result<Vec<Vec<usize>>> {
        let map: BTreeMap<usize, Vec<usize>> = serde_json::from_reader(reader)?;
        let n = map.len();
        if map.keys().copied().ne(0..n) {
            return Err(Error::invalid("device ids must be 0..N without gaps"));
        }
        Ok(map.into_values().collect())
    }
}

pub fn partition(dataset: &Dataset, scheme: Scheme, num_devices: usize, seed: u64) -> Result<Partition> {
    match scheme {
        Scheme::Dirichlet { alpha } => dirichlet_partition(dataset, alpha, num_devices, seed),
        Scheme::Pathological { classes_per_device } => {
            pathological_partition(dataset, classes_per_device, num_devices, seed)
        }
        Scheme::Iid => iid_partition(dataset, num_devices, seed),
    }
}

fn check_device_count(dataset: &Dataset, num_devices: usize) -> Result<()> {
    if num_devices == 0 {
        return Err(Error::invalid("number of devices must be at least 1"));
    }
    if num_devices > dataset.len() {
        return Err(Error::invalid(format!(
            "{num_devices} devices cannot all receive samples from {} samples",
            dataset.len()
        )));
    }
    Ok(())
}

fn finish(mut assignments: Vec<Vec<usize>>, scheme: Scheme, seed: u64, n: usize) -> Result<Partition> {
    assignments.iter_mut().for_each(|a| a.sort_unstable());
    let p = Partition {
        assignments,
        scheme,
        seed,
    };
    p.validate(n)?;
    Ok(p)
}

/// Draws `Dir(alpha · 1_n)` through normalized Gamma variates. If every
/// variate underflows to zero (possible for tiny `alpha`), all mass goes to
/// one uniformly chosen coordinate, which is the limiting distribution.
fn symmetric_dirichlet<R: Rng>(alpha: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut p: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = p.iter().sum();
    if total > 0.0 && total.is_finite() {
        p.iter_mut().for_each(|v| *v /= total);
    } else {
        p.iter_mut().for_each(|v| *v = 0.0);
        p[rng.random_range(0..n)] = 1.0;
    }
    p
}

/// Samples an index from a discrete distribution by inverse CDF.
fn categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` just below 1: fall back to the last positive entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// For each class, draws device proportions `p_k ~ Dir(alpha)` and assigns
/// every sample of that class to a device drawn from `p_k`. Devices left
/// empty each take one sample from the currently largest device (lowest id
/// on ties, its highest index).
pub fn dirichlet_partition(dataset: &Dataset, alpha: f64, num_devices: usize, seed: u64) -> Result<Partition> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("Dirichlet alpha must be positive, got {alpha}")));
    }
    check_device_count(dataset, num_devices)?;
    let scheme = Scheme::Dirichlet { alpha };
    let mut rng = RngStream::global(seed, Purpose::Partition).rng();
    let mut assignments = vec![Vec::new(); num_devices];
    for members in dataset.class_indices() {
        if num_devices == 1 {
            assignments[0].extend(members);
            continue;
        }
        let probs = symmetric_dirichlet(alpha, num_devices, &mut rng);
        for i in members {
            assignments[categorical(&probs, &mut rng)].push(i);
        }
    }
    while let Some(empty) = assignments.iter().position(Vec::is_empty) {
        let largest = (0..num_devices)
            .max_by(|&a, &b| assignments[a].len().cmp(&assignments[b].len()).then(b.cmp(&a)))
            .expect("at least one device");
        assignments[largest].sort_unstable();
        let stolen = assignments[largest].pop().expect("largest device is nonempty");
        assignments[empty].push(stolen);
    }
    finish(assignments, scheme, seed, dataset.len())
}

/// Each device holds exactly `classes_per_device` classes.
///
/// Classes are dealt round-robin over a seeded class permutation: device `i`
/// gets `perm[(i·c + j) mod C]` for `j < c`, which gives distinct classes per
/// device and covers every class once `N·c ≥ C`. Each class's samples are
/// shuffled and cut into near-equal contiguous chunks, handed to its holders
/// in a seeded order.
pub fn pathological_partition(
    dataset: &Dataset,
    classes_per_device: usize,
    num_devices: usize,
    seed: u64,
) -> Result<Partition> {
    let num_classes = dataset.num_classes();
    let c = classes_per_device;
    if c == 0 || c > num_classes {
        return Err(Error::invalid(format!(
            "classes per device must be in 1..={num_classes}, got {c}"
        )));
    }
    check_device_count(dataset, num_devices)?;
    if num_devices * c < num_classes {
        return Err(Error::invalid(format!(
            "{num_devices} devices with {c} classes each cannot cover {num_classes} classes"
        )));
    }
    let scheme = Scheme::Pathological {
        classes_per_device: c,
    };
    let mut rng = RngStream::global(seed, Purpose::Partition).rng();
    let mut class_order: Vec<usize> = (0..num_classes).collect();
    class_order.shuffle(&mut rng);

    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for device in 0..num_devices {
        for j in 0..c {
            holders[class_order[(device * c + j) % num_classes]].push(device);
        }
    }

    let mut assignments = vec![Vec::new(); num_devices];
    for (class, mut members) in dataset.class_indices().into_iter().enumerate() {
        let owners = &mut holders[class];
        members.shuffle(&mut rng);
        owners.shuffle(&mut rng);
        let (base, extra) = (members.len() / owners.len(), members.len() % owners.len());
        let mut start = 0;
        for (slot, &device) in owners.iter().enumerate() {
            let len = base + usize::from(slot < extra);
            assignments[device].extend_from_slice(&members[start..start + len]);
            start += len;
        }
    }
    if let Some(d) = assignments.iter().position(Vec::is_empty) {
        return Err(Error::invalid(format!(
            "pathological split leaves device {d} empty; classes are too small for {num_devices} devices"
        )));
    }
    finish(assignments, scheme, seed, dataset.len())
}

/// Seeded shuffle dealt into near-equal contiguous chunks.
pub fn iid_partition(dataset: &Dataset, num_devices: usize, seed: u64) -> Result<Partition> {
    check_device_count(dataset, num_devices)?;
    let mut rng = RngStream::global(seed, Purpose::Partition).rng();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let (base, extra) = (order.len() / num_devices, order.len() % num_devices);
    let mut assignments = Vec::with_capacity(num_devices);
    let mut start = 0;
    for d in 0..num_devices {
        let len = base + usize::from(d < extra);
        assignments.push(order[start..start + len].to_vec());
        start += len;
    }
    finish(assignments, Scheme::Iid, seed, dataset.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn dataset(classes: usize, per_class: usize) -> Dataset {
        generate_synthetic(
            SyntheticSpec {
                num_classes: classes,
                input_dim: classes.max(2),
                samples_per_class: per_class,
                cluster_spread: 0.3,
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn single_device_gets_everything() {
        let ds = dataset(10, 10);
        let p = dirichlet_partition(&ds, 0.5, 1, 3).unwrap();
        assert_eq!(p.assignments[0], (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn too_many_devices_rejected() {
        let ds = dataset(2, 3);
        assert!(matches!(dirichlet_partition(&ds, 1.0, 7, 0), Err(Error::InvalidArgument(_))));
        assert!(dirichlet_partition(&ds, 0.0, 2, 0).is_err());
    }

    #[test]
    fn extreme_dirichlet_is_repaired() {
        let ds = dataset(3, 4);
        for seed in 0..20 {
            let p = dirichlet_partition(&ds, 0.01, 12, seed).unwrap();
            assert!(p.sizes().iter().all(|&s| s == 1));
        }
    }

    #[test]
    fn pathological_whole_classes() {
        let ds = dataset(10, 20);
        let p = pathological_partition(&ds, 1, 10, 4).unwrap();
        let hist = p.label_histograms(&ds);
        let mut owners: Vec<usize> = hist
            .iter()
            .map(|h| {
                let nz: Vec<usize> = (0..10).filter(|&k| h[k] > 0).collect();
                assert_eq!(nz.len(), 1);
                assert_eq!(h[nz[0]], 20);
                nz[0]
            })
            .collect();
        owners.sort_unstable();
        assert_eq!(owners, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn pathological_all_classes_everywhere() {
        let ds = dataset(10, 20);
        let p = pathological_partition(&ds, 10, 5, 4).unwrap();
        for h in p.label_histograms(&ds) {
            assert!(h.iter().all(|&c| c == 4));
        }
    }

    #[test]
    fn pathological_infeasible() {
        let ds = dataset(10, 20);
        assert!(pathological_partition(&ds, 2, 4, 0).is_err());
        assert!(pathological_partition(&ds, 0, 40, 0).is_err());
        assert!(pathological_partition(&ds, 11, 40, 0).is_err());
    }

    #[test]
    fn json_export_maps_ids_to_lists() {
        let ds = dataset(2, 3);
        let p = iid_partition(&ds, 2, 9).unwrap();
        let mut buf = Vec::new();
        p.write_json(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"0\":["));
        assert_eq!(Partition::read_assignments_json(buf.as_slice()).unwrap(), p.assignments);
    }
}
