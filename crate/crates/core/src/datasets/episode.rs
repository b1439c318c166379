use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::{DatasetRole, DomainDataset, ImageTensor};
use crate::error::{IssError, Result};

/// Query images of an episode. Pixel access is counted so adaptation code
/// can be checked to never look at them.
#[derive(Debug)]
pub struct QuerySet {
    images: Vec<ImageTensor>,
    labels: Vec<usize>,
    reads: AtomicU64,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Episode-local labels in `0..ways`.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[ImageTensor] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.images
    }

    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }
}

/// One `ways`-way `shots`-shot task with `queries` query images per class.
#[derive(Debug)]
pub struct Episode {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    support: Vec<ImageTensor>,
    support_labels: Vec<usize>,
    pub query: QuerySet,
    /// `class_remap[c]` is the dataset label behind episode class `c`.
    pub class_remap: Vec<usize>,
    /// Dataset indices, for auditing.
    pub support_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
}

impl Episode {
    pub fn support_images(&self) -> &[ImageTensor] {
        &self.support
    }

    /// Episode-local labels in `0..ways`.
    pub fn support_labels(&self) -> &[usize] {
        &self.support_labels
    }

    /// Builds an episode from explicit parts (tests, external tooling).
    pub fn from_parts(
        ways: usize,
        support: Vec<(ImageTensor, usize)>,
        query: Vec<(ImageTensor, usize)>,
    ) -> Result<Self> {
        if ways == 0 || support.is_empty() {
            return Err(IssError::Validation("episode needs at least one class and support item".into()));
        }
        if support.iter().chain(&query).any(|(_, y)| *y >= ways) {
            return Err(IssError::Validation(format!("episode label outside 0..{ways}")));
        }
        let mut per_class = vec![0usize; ways];
        for (_, y) in &support {
            per_class[*y] += 1;
        }
        if per_class.iter().any(|&n| n == 0) {
            return Err(IssError::Validation("every episode class needs a support item".into()));
        }
        let shots = support.len() / ways;
        let queries = query.len() / ways;
        let (support, support_labels): (Vec<_>, Vec<_>) = support.into_iter().unzip();
        let (qi, ql): (Vec<_>, Vec<_>) = query.into_iter().unzip();
        Ok(Self {
            ways,
            shots,
            queries,
            support_indices: (0..support.len()).collect(),
            query_indices: (0..qi.len()).collect(),
            support,
            support_labels,
            query: QuerySet { images: qi, labels: ql, reads: AtomicU64::new(0) },
            class_remap: (0..ways).collect(),
        })
    }

    /// The same episode with support items reordered by `perm`.
    pub fn permute_support(&self, perm: &[usize]) -> Self {
        Self {
            ways: self.ways,
            shots: self.shots,
            queries: self.queries,
            support: perm.iter().map(|&i| self.support[i].clone()).collect(),
            support_labels: perm.iter().map(|&i| self.support_labels[i]).collect(),
            query: QuerySet {
                images: self.query.images.clone(),
                labels: self.query.labels.clone(),
                reads: AtomicU64::new(0),
            },
            class_remap: self.class_remap.clone(),
            support_indices: perm.iter().map(|&i| self.support_indices[i]).collect(),
            query_indices: self.query_indices.clone(),
        }
    }
}

/// Checks that every class can supply `shots + queries` samples and that
/// there are enough classes.
pub fn check_feasible(ds: &DomainDataset, ways: usize, shots: usize, queries: usize) -> Result<()> {
    let need = shots + queries;
    for (&label, members) in ds.class_index() {
        if members.len() < need {
            return Err(IssError::EpisodeInfeasible {
                class: ds.class_name(label),
                available: members.len(),
                required: need,
            });
        }
    }
    let classes = ds.class_index().len();
    if classes < ways {
        return Err(IssError::EpisodeInfeasible {
            class: format!("<{} classes in `{}`>", classes, ds.name()),
            available: classes,
            required: ways,
        });
    }
    Ok(())
}

/// Draws `ways` classes uniformly without replacement, then `shots + queries`
/// distinct members of each, split into support and query.
pub fn sample_episode<R: Rng + ?Sized>(
    ds: &DomainDataset,
    ways: usize,
    shots: usize,
    queries: usize,
    rng: &mut R,
) -> Result<Episode> {
    if ds.role() != DatasetRole::Target {
        return Err(IssError::Validation(format!(
            "episodes are drawn from target datasets; `{}` is {:?}",
            ds.name(),
            ds.role()
        )));
    }
    if ways == 0 || shots == 0 {
        return Err(IssError::Validation("ways and shots must be positive".into()));
    }
    check_feasible(ds, ways, shots, queries)?;

    let classes: Vec<usize> = ds.label_space();
    let chosen: Vec<usize> = classes.choose_multiple(rng, ways).copied().collect();
    let mut support = Vec::with_capacity(ways * shots);
    let mut support_labels = Vec::with_capacity(ways * shots);
    let mut support_indices = Vec::with_capacity(ways * shots);
    let mut query = Vec::with_capacity(ways * queries);
    let mut query_labels = Vec::with_capacity(ways * queries);
    let mut query_indices = Vec::with_capacity(ways * queries);
    for (c, label) in chosen.iter().enumerate() {
        let mut members = ds.class_index()[label].clone();
        members.shuffle(rng);
        for &i in &members[..shots] {
            support.push(ds.image(i).clone());
            support_labels.push(c);
            support_indices.push(i);
        }
        for &i in &members[shots..shots + queries] {
            query.push(ds.image(i).clone());
            query_labels.push(c);
            query_indices.push(i);
        }
    }
    Ok(Episode {
        ways,
        shots,
        queries,
        support,
        support_labels,
        query: QuerySet { images: query, labels: query_labels, reads: AtomicU64::new(0) },
        class_remap: chosen,
        support_indices,
        query_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn target(classes: usize, per_class: usize) -> DomainDataset {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                let v = ((c * per_class + i) % 97) as f32 / 97.0;
                images.push(ImageTensor::filled(1, 2, 2, v).unwrap());
                labels.push(c);
            }
        }
        DomainDataset::new("t", DatasetRole::Target, images, Some(labels)).unwrap()
    }

    #[test]
    fn five_way_one_shot_sizes() {
        let ds = target(10, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = sample_episode(&ds, 5, 1, 15, &mut rng).unwrap();
        assert_eq!(ep.support_images().len(), 5);
        assert_eq!(ep.query.len(), 75);
        for c in 0..5 {
            assert_eq!(ep.support_labels().iter().filter(|&&y| y == c).count(), 1);
            assert_eq!(ep.query.labels().iter().filter(|&&y| y == c).count(), 15);
        }
    }

    #[test]
    fn small_class_makes_five_shot_infeasible() {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for c in 0..6 {
            let n = if c == 3 { 18 } else { 25 };
            for _ in 0..n {
                images.push(ImageTensor::filled(1, 1, 1, 0.5).unwrap());
                labels.push(c);
            }
        }
        let ds = DomainDataset::new("t", DatasetRole::Target, images, Some(labels)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        match sample_episode(&ds, 5, 5, 15, &mut rng) {
            Err(IssError::EpisodeInfeasible { class, available, required }) => {
                assert_eq!((class.as_str(), available, required), ("3", 18, 20));
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn too_few_classes_is_infeasible() {
        let ds = target(3, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(sample_episode(&ds, 5, 1, 15, &mut rng), Err(IssError::EpisodeInfeasible { .. })));
    }

    #[test]
    fn same_rng_state_same_episode() {
        let ds = target(10, 20);
        let a = sample_episode(&ds, 5, 1, 15, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_episode(&ds, 5, 1, 15, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.support_indices, b.support_indices);
        assert_eq!(a.query_indices, b.query_indices);
        assert_eq!(a.class_remap, b.class_remap);
    }

    #[test]
    fn non_target_role_is_rejected() {
        let images = vec![ImageTensor::filled(1, 1, 1, 0.5).unwrap(); 4];
        let ds = DomainDataset::new("s", DatasetRole::LabeledSource, images, Some(vec![0, 0, 1, 1])).unwrap();
        assert!(sample_episode(&ds, 2, 1, 1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
