//! Splits, leakage harvesting and the dilution baseline.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::protections::{ProtectionSpec, Protector};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub protect_set: Dataset,
    /// Source of leaked pairs; disjoint from `protect_set`.
    pub reference_set: Dataset,
    pub test_set: Dataset,
}

fn check_unique_ids(d: &Dataset) -> Result<()> {
    let mut seen = BTreeSet::new();
    for s in d.iter() {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::Config(format!("duplicate image id {}", s.id)));
        }
    }
    Ok(())
}

/// Largest-remainder apportionment of `total` over `weights`, never giving
/// a part more than its `cap`; leftovers go to parts with spare capacity.
fn apportion(total: usize, weights: &[usize], caps: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<usize> = weights.iter().map(|&w| (total * w / sum).min(total)).collect();
    let mut rema: Vec<(usize, usize)> = weights.iter().enumerate().map(|(i, &w)| (total * w % sum, i)).collect();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = total - out.iter().sum::<usize>();
    for &(_, i) in rema.iter().cycle().take(rema.len() * 2) {
        if left == 0 {
            break;
        }
        if out[i] < caps[i] {
            out[i] += 1;
            left -= 1;
        }
    }
    for (o, &c) in out.iter_mut().zip(caps) {
        if *o > c {
            left += *o - c;
            *o = c;
        }
    }
    for i in 0..out.len() {
        let add = left.min(caps[i] - out[i]);
        out[i] += add;
        left -= add;
    }
    out
}

/// Seeded, class-stratified split into protect / reference / test parts.
pub fn make_splits(dataset: &Dataset, sizes: (usize, usize, usize), seed: u64) -> Result<DatasetSplit> {
    let (a, b, c) = sizes;
    if a + b + c > dataset.len() {
        return Err(Error::Infeasible(format!("split sizes {a} + {b} + {c} exceed the {} available images", dataset.len())));
    }
    check_unique_ids(dataset)?;
    let classes = dataset.class_count();
    let mut rng = rng::rng_from_seed(rng::derive_seed(seed, "split"));
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in dataset.iter().enumerate() {
        pools[s.label].push(i);
    }
    for p in &mut pools {
        rng::shuffle(&mut rng, p);
    }
    let mut parts = Vec::with_capacity(3);
    for size in [a, b, c] {
        let avail: Vec<usize> = pools.iter().map(Vec::len).collect();
        let counts = apportion(size, &avail, &avail);
        let mut idx = Vec::with_capacity(size);
        for (pool, &k) in pools.iter_mut().zip(&counts) {
            let at = pool.len() - k;
            idx.extend(pool.drain(at..));
        }
        idx.sort_unstable();
        parts.push(Dataset::new(idx.into_iter().map(|i| dataset.samples[i].clone()).collect()));
    }
    let test_set = parts.pop().expect("three parts");
    let reference_set = parts.pop().expect("three parts");
    let protect_set = parts.pop().expect("three parts");
    Ok(DatasetSplit { protect_set, reference_set, test_set })
}

/// Which reference images to send through the protection service.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LeakageRequest {
    /// Total number of pairs; ignored when `per_class` is set.
    pub n: Option<usize>,
    /// Restrict harvesting to these classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_filter: Option<Vec<usize>>,
    /// Pairs per (filtered) class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<usize>,
}

impl LeakageRequest {
    pub fn total(n: usize) -> Self {
        Self { n: Some(n), class_filter: None, per_class: None }
    }

    pub fn per_class(classes: Vec<usize>, per_class: usize) -> Self {
        Self { n: None, class_filter: Some(classes), per_class: Some(per_class) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    /// Content digest of the clean image.
    pub id: String,
    pub label: usize,
    pub clean: Image,
    pub protected: Image,
}

/// Aligned `(clean, protected)` pairs plus the protection that made them.
#[derive(Debug, Clone, PartialEq)]
pub struct PairArchive {
    pub spec: ProtectionSpec,
    pub records: Vec<PairRecord>,
}

impl PairArchive {
    pub fn protection_id(&self) -> String {
        self.spec.id()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Digest over the protection description and every record's id, label
    /// and 8-bit pixels; any change to those changes the hash.
    pub fn manifest_hash(&self) -> String {
        let mut h = Sha256::new();
        let desc = self.spec.describe();
        h.update((desc.len() as u64).to_le_bytes());
        h.update(desc.as_bytes());
        h.update((self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            h.update((r.id.len() as u64).to_le_bytes());
            h.update(r.id.as_bytes());
            h.update((r.label as u64).to_le_bytes());
            for img in [&r.clean, &r.protected] {
                let s = img.shape;
                for v in [s.channels, s.height, s.width] {
                    h.update((v as u32).to_le_bytes());
                }
                h.update(img.to_hwc_u8());
            }
        }
        hex::encode(h.finalize())
    }

    /// Checks every stored protected image against a fresh protection of
    /// its clean image; returns the ids that do not match.
    pub fn verify(&self) -> Result<Vec<String>> {
        let Some(first) = self.records.first() else { return Ok(Vec::new()) };
        let p = Protector::new(&self.spec, first.clean.shape)?;
        let mut bad = Vec::new();
        for r in &self.records {
            if p.protect(&r.clean, r.label)?.to_hwc_u8() != r.protected.to_hwc_u8() {
                bad.push(r.id.clone());
            }
        }
        Ok(bad)
    }

    pub fn clean_dataset(&self) -> Dataset {
        self.records.iter().map(|r| Sample { id: r.id.clone(), label: r.label, image: r.clean.clone() }).collect()
    }

    pub fn protected_dataset(&self) -> Dataset {
        self.records.iter().map(|r| Sample { id: r.id.clone(), label: r.label, image: r.protected.clone() }).collect()
    }
}

/// Samples reference images per `request`, queries the protector on each,
/// and returns the aligned pairs in sampling order.
pub fn harvest_leakage(protector: &Protector, reference: &Dataset, request: &LeakageRequest, seed: u64) -> Result<PairArchive> {
    check_unique_ids(reference)?;
    let mut rng = rng::rng_from_seed(rng::derive_seed(seed, "harvest"));
    let allowed = |label: usize| request.class_filter.as_ref().is_none_or(|f| f.contains(&label));
    let chosen: Vec<usize> = match request.per_class {
        Some(k) => {
            let classes: Vec<usize> = match &request.class_filter {
                Some(f) => f.clone(),
                None => (0..reference.class_count()).collect(),
            };
            let mut out = Vec::new();
            for &c in &classes {
                let mut pool: Vec<usize> = reference.iter().enumerate().filter(|(_, s)| s.label == c).map(|(i, _)| i).collect();
                if pool.len() < k {
                    return Err(Error::Infeasible(format!("class {c} has {} reference images, {k} requested", pool.len())));
                }
                rng::shuffle(&mut rng, &mut pool);
                out.extend_from_slice(&pool[..k]);
            }
            out
        }
        None => {
            let n = request.n.ok_or_else(|| Error::Config("leakage needs either n or per_class".into()))?;
            let mut pool: Vec<usize> = reference.iter().enumerate().filter(|(_, s)| allowed(s.label)).map(|(i, _)| i).collect();
            if pool.len() < n {
                return Err(Error::Infeasible(format!("{n} pairs requested, {} reference images available", pool.len())));
            }
            rng::shuffle(&mut rng, &mut pool);
            pool.truncate(n);
            pool
        }
    };
    let records = chosen
        .into_iter()
        .map(|i| {
            let s = &reference.samples[i];
            Ok(PairRecord {
                id: s.image.content_id(),
                label: s.label,
                clean: s.image.clone(),
                protected: protector.protect(&s.image, s.label)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairArchive { spec: protector.spec().clone(), records })
}

/// Protected data with extra clean images appended; `protected[i]` tells
/// whether element `i` came from the protected set.
#[derive(Debug, Clone, PartialEq)]
pub struct Diluted {
    pub dataset: Dataset,
    pub protected: Vec<bool>,
}

pub fn dilute(protected: &Dataset, clean_extra: &Dataset) -> Result<Diluted> {
    let ids: BTreeSet<&str> = protected.iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = clean_extra.iter().find(|s| ids.contains(s.id.as_str())) {
        return Err(Error::Config(format!("id {} appears in both sets", s.id)));
    }
    let mut samples = protected.samples.clone();
    samples.extend(clean_extra.samples.iter().cloned());
    let mut flags = vec![true; protected.len()];
    flags.resize(samples.len(), false);
    Ok(Diluted { dataset: Dataset::new(samples), protected: flags })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn data(n: usize) -> Dataset {
        generate(&SynthConfig { size: 8, noise: 0.05, ..SynthConfig::default() }, n).unwrap()
    }

    #[test]
    fn apportion_respects_caps() {
        assert_eq!(apportion(10, &[5, 5], &[5, 5]), vec![5, 5]);
        assert_eq!(apportion(3, &[1, 1, 1], &[1, 1, 1]), vec![1, 1, 1]);
        assert_eq!(apportion(4, &[1, 9], &[1, 2]).iter().sum::<usize>(), 3);
    }

    #[test]
    fn splits_are_disjoint_stratified_and_seeded() {
        let d = data(200);
        let s = make_splits(&d, (100, 50, 50), 3).unwrap();
        assert_eq!(s, make_splits(&d, (100, 50, 50), 3).unwrap());
        assert_eq!(s.protect_set.class_histogram(10), vec![10; 10]);
        assert_eq!(s.reference_set.class_histogram(10), vec![5; 10]);
        let ids = |d: &Dataset| d.iter().map(|s| s.id.clone()).collect::<BTreeSet<_>>();
        assert!(ids(&s.protect_set).is_disjoint(&ids(&s.reference_set)));
        assert!(ids(&s.protect_set).is_disjoint(&ids(&s.test_set)));
        assert!(ids(&s.reference_set).is_disjoint(&ids(&s.test_set)));
        assert!(make_splits(&d, (150, 50, 1), 0).is_err());
    }

    #[test]
    fn per_class_harvest() {
        let d = data(100);
        let p = Protector::new(&ProtectionSpec::one_pixel(10, 0), d.shape().unwrap()).unwrap();
        let a = harvest_leakage(&p, &d, &LeakageRequest::per_class(vec![1, 4, 7], 5), 2).unwrap();
        assert_eq!(a.len(), 15);
        assert!(a.labels().iter().all(|l| [1, 4, 7].contains(l)));
        assert!(a.verify().unwrap().is_empty());
        let all = harvest_leakage(&p, &d, &LeakageRequest { n: None, class_filter: None, per_class: Some(5) }, 2).unwrap();
        assert_eq!(all.len(), 50);
        assert!(harvest_leakage(&p, &d, &LeakageRequest::total(101), 0).is_err());
        assert!(harvest_leakage(&p, &d, &LeakageRequest::per_class(vec![0], 11), 0).is_err());
    }

    #[test]
    fn manifest_hash_tracks_content() {
        let d = data(20);
        let p = Protector::new(&ProtectionSpec::classwise_linf(0.1, 10, 0), d.shape().unwrap()).unwrap();
        let a = harvest_leakage(&p, &d, &LeakageRequest::total(10), 0).unwrap();
        let mut b = a.clone();
        assert_eq!(a.manifest_hash(), b.manifest_hash());
        b.records[3].protected.data[0] = if b.records[3].protected.data[0] > 0.5 { 0.0 } else { 1.0 };
        assert_ne!(a.manifest_hash(), b.manifest_hash());
        assert_eq!(b.verify().unwrap(), vec![b.records[3].id.clone()]);
        let mut c = a.clone();
        c.records[0].label = (c.records[0].label + 1) % 10;
        assert_ne!(a.manifest_hash(), c.manifest_hash());
    }

    #[test]
    fn dilution() {
        let d = data(30);
        let (a, b) = (Dataset::new(d.samples[..20].to_vec()), Dataset::new(d.samples[20..].to_vec()));
        let out = dilute(&a, &b).unwrap();
        assert_eq!(out.dataset.len(), 30);
        assert_eq!(out.protected.iter().filter(|&&p| p).count(), 20);
        assert_eq!(dilute(&a, &Dataset::default()).unwrap().dataset, a);
        assert!(dilute(&a, &a).is_err());
    }
}
