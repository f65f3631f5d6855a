//! Streaming second-moment accumulation over patch batches.
//!
//! The auto-correlations `C11 = X Xᵀ` and `C22 = Y Yᵀ` decompose into sums of
//! per-batch Gram matrices, and the within/between-class cross-correlations
//! only need per-class column sums. An accumulator therefore holds
//! `O(dim² + dim·classes)` state regardless of how many patches it has seen,
//! and two accumulators over disjoint batches combine by addition.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{config_err, shape_err, Result};
use crate::exec::ExecSettings;
use crate::patches::PatchMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    dim: usize,
    c11: Array2<f64>,
    c22: Array2<f64>,
    /// `classes x dim`, row `c` is the sum of class-`c` view-1 patches.
    class_sum1: Array2<f64>,
    class_sum2: Array2<f64>,
    global_sum1: Array1<f64>,
    global_sum2: Array1<f64>,
    patch_count: u64,
    class_patch_count: Vec<u64>,
}

impl MomentAccumulator {
    pub fn new(dim: usize, classes: usize) -> Self {
        Self {
            dim,
            c11: Array2::zeros((dim, dim)),
            c22: Array2::zeros((dim, dim)),
            class_sum1: Array2::zeros((classes, dim)),
            class_sum2: Array2::zeros((classes, dim)),
            global_sum1: Array1::zeros(dim),
            global_sum2: Array1::zeros(dim),
            patch_count: 0,
            class_patch_count: vec![0; classes],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.class_patch_count.len()
    }

    pub fn patch_count(&self) -> u64 {
        self.patch_count
    }

    pub fn class_patch_count(&self) -> &[u64] {
        &self.class_patch_count
    }

    pub fn c11(&self) -> &Array2<f64> {
        &self.c11
    }

    pub fn c22(&self) -> &Array2<f64> {
        &self.c22
    }

    pub fn class_sums(&self) -> (&Array2<f64>, &Array2<f64>) {
        (&self.class_sum1, &self.class_sum2)
    }

    pub fn global_sums(&self) -> (&Array1<f64>, &Array1<f64>) {
        (&self.global_sum1, &self.global_sum2)
    }

    /// Adds one batch of paired patches. `labels[c]` is the class of column `c`.
    pub fn accumulate_batch(
        &mut self,
        p1: &PatchMatrix,
        p2: &PatchMatrix,
        labels: &[usize],
    ) -> Result<()> {
        self.check_batch(p1, p2)?;
        if labels.len() != p1.cols() {
            return Err(shape_err!(
                "{} labels for {} patch columns",
                labels.len(),
                p1.cols()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.classes()) {
            return Err(shape_err!("label {bad} out of range for {} classes", self.classes()));
        }
        self.add_grams(p1.view(), p2.view());
        for (c, &label) in labels.iter().enumerate() {
            self.add_column(label, p1.column(c), p2.column(c));
        }
        Ok(())
    }

    /// Like [`accumulate_batch`](Self::accumulate_batch), but every column
    /// of sample `k` (as recorded in the matrix origins) has class
    /// `sample_labels[k]`.
    pub fn accumulate_samples(
        &mut self,
        p1: &PatchMatrix,
        p2: &PatchMatrix,
        sample_labels: &[usize],
    ) -> Result<()> {
        self.check_batch(p1, p2)?;
        if p1.sample_ids() != p2.sample_ids() {
            return Err(shape_err!("view patch matrices come from different samples"));
        }
        let per = p1.per_sample();
        for &s in p1.sample_ids() {
            match sample_labels.get(s) {
                Some(&l) if l < self.classes() => {}
                _ => return Err(shape_err!("no valid label for sample {s}")),
            }
        }
        self.add_grams(p1.view(), p2.view());
        let v1 = p1.view();
        let v2 = p2.view();
        for (block, &s) in p1.sample_ids().iter().enumerate() {
            let label = sample_labels[s];
            let cols = block * per..(block + 1) * per;
            let s1 = v1.slice(ndarray::s![.., cols.clone()]).sum_axis(Axis(1));
            let s2 = v2.slice(ndarray::s![.., cols]).sum_axis(Axis(1));
            self.class_sum1.row_mut(label).scaled_add(1.0, &s1);
            self.class_sum2.row_mut(label).scaled_add(1.0, &s2);
            self.global_sum1 += &s1;
            self.global_sum2 += &s2;
            self.patch_count += per as u64;
            self.class_patch_count[label] += per as u64;
        }
        Ok(())
    }

    fn check_batch(&self, p1: &PatchMatrix, p2: &PatchMatrix) -> Result<()> {
        if p1.dim() != self.dim || p2.dim() != self.dim {
            return Err(shape_err!(
                "patch dims ({}, {}) do not match accumulator dim {}",
                p1.dim(),
                p2.dim(),
                self.dim
            ));
        }
        if p1.cols() != p2.cols() {
            return Err(shape_err!(
                "views have {} and {} patch columns",
                p1.cols(),
                p2.cols()
            ));
        }
        Ok(())
    }

    fn add_grams(&mut self, x: ArrayView2<f64>, y: ArrayView2<f64>) {
        add_symmetric_gram(&mut self.c11, x);
        add_symmetric_gram(&mut self.c22, y);
    }

    fn add_column(&mut self, label: usize, x: &[f64], y: &[f64]) {
        let x = ndarray::aview1(x);
        let y = ndarray::aview1(y);
        self.class_sum1.row_mut(label).scaled_add(1.0, &x);
        self.class_sum2.row_mut(label).scaled_add(1.0, &y);
        self.global_sum1 += &x;
        self.global_sum2 += &y;
        self.patch_count += 1;
        self.class_patch_count[label] += 1;
    }

    /// Componentwise sum of two accumulators over disjoint data.
    pub fn merge(mut self, other: &MomentAccumulator) -> Result<MomentAccumulator> {
        if self.dim != other.dim || self.classes() != other.classes() {
            return Err(shape_err!(
                "cannot merge accumulators of dim/classes ({}, {}) and ({}, {})",
                self.dim,
                self.classes(),
                other.dim,
                other.classes()
            ));
        }
        self.c11 += &other.c11;
        self.c22 += &other.c22;
        self.class_sum1 += &other.class_sum1;
        self.class_sum2 += &other.class_sum2;
        self.global_sum1 += &other.global_sum1;
        self.global_sum2 += &other.global_sum2;
        self.patch_count += other.patch_count;
        for (a, b) in self.class_patch_count.iter_mut().zip(&other.class_patch_count) {
            *a += b;
        }
        Ok(self)
    }

    /// Within/between-class cross-correlations and ridge-regularized
    /// auto-correlations.
    ///
    /// `Cw = Σ_c s1_c s2_cᵀ`, `Cb = g1 g2ᵀ − Cw` (every cross-class pair),
    /// `C̃ = Cw − Cb`. The ridge adds `epsilon · trace(C)/dim` to the diagonal.
    pub fn finalize(&self, epsilon: f64) -> Result<DiscriminantMoments> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(config_err!("ridge epsilon must be finite and >= 0, got {epsilon}"));
        }
        if self.patch_count == 0 {
            return Err(crate::error::Error::EmptyDataset(
                "no patches were accumulated".into(),
            ));
        }
        let cw = self.class_sum1.t().dot(&self.class_sum2);
        let global = outer(&self.global_sum1, &self.global_sum2);
        let cb = &global - &cw;
        let ctilde = &cw - &cb;
        Ok(DiscriminantMoments {
            c11: ridge(&self.c11, epsilon),
            c22: ridge(&self.c22, epsilon),
            cw,
            cb,
            ctilde,
        })
    }
}

fn add_symmetric_gram(acc: &mut Array2<f64>, x: ArrayView2<f64>) {
    let n = acc.nrows();
    let mut g = Array2::<f64>::zeros((n, n));
    general_mat_mul(1.0, &x, &x.t(), 0.0, &mut g);
    for i in 0..n {
        acc[[i, i]] += g[[i, i]];
        for j in i + 1..n {
            let v = 0.5 * (g[[i, j]] + g[[j, i]]);
            acc[[i, j]] += v;
            acc[[j, i]] += v;
        }
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

fn ridge(c: &Array2<f64>, epsilon: f64) -> Array2<f64> {
    let mut out = c.clone();
    if epsilon > 0.0 {
        let shift = epsilon * c.diag().sum() / c.nrows() as f64;
        out.diag_mut().iter_mut().for_each(|d| *d += shift);
    }
    out
}

/// Finalized moments consumed by the canonical-correlation solver.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminantMoments {
    pub c11: Array2<f64>,
    pub c22: Array2<f64>,
    pub cw: Array2<f64>,
    pub cb: Array2<f64>,
    pub ctilde: Array2<f64>,
}

/// Reduces `batches` items into one accumulator using `fill` per item.
///
/// Deterministic mode builds one accumulator per item and merges them with a
/// fixed left-to-right pairwise tree, so the result does not depend on the
/// worker count. Otherwise workers fold items in whatever order they run.
pub fn reduce_batches<F>(
    batches: usize,
    dim: usize,
    classes: usize,
    exec: &ExecSettings,
    fill: F,
) -> Result<MomentAccumulator>
where
    F: Fn(usize, &mut MomentAccumulator) -> Result<()> + Sync,
{
    exec.install(|| {
        if exec.deterministic {
            let parts = (0..batches)
                .into_par_iter()
                .map(|b| {
                    let mut acc = MomentAccumulator::new(dim, classes);
                    fill(b, &mut acc)?;
                    Ok(acc)
                })
                .collect::<Result<Vec<_>>>()?;
            tree_merge(parts, dim, classes)
        } else {
            (0..batches)
                .into_par_iter()
                .try_fold(
                    || MomentAccumulator::new(dim, classes),
                    |mut acc, b| {
                        fill(b, &mut acc)?;
                        Ok(acc)
                    },
                )
                .try_reduce(|| MomentAccumulator::new(dim, classes), |a, b| a.merge(&b))
        }
    })
}

/// Merges neighbors pairwise, level by level: `((a0+a1)+(a2+a3))+...`.
pub fn tree_merge(
    mut level: Vec<MomentAccumulator>,
    dim: usize,
    classes: usize,
) -> Result<MomentAccumulator> {
    if level.is_empty() {
        return Ok(MomentAccumulator::new(dim, classes));
    }
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(a.merge(&b)?),
                None => next.push(a),
            }
        }
        level = next;
    }
    Ok(level.pop().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImagePlane;
    use crate::patches::{extract_patches, PatchGeometry};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Patch matrix whose columns are the given vectors.
    fn cols(dim: usize, data: &[Vec<f64>]) -> PatchMatrix {
        let flat: Vec<f64> = data.iter().flatten().copied().collect();
        let plane = ImagePlane::from_vec(data.len(), dim, flat).unwrap();
        // 1 x dim windows over a (n x dim) plane give exactly the rows
        let g = PatchGeometry::new(1, dim, 1, crate::patches::Padding::None).unwrap();
        extract_patches(&plane, &g, false).unwrap()
    }

    fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let diff = (a - b).mapv(|v| v * v).sum().sqrt();
        let norm = b.mapv(|v| v * v).sum().sqrt().max(f64::MIN_POSITIVE);
        diff / norm
    }

    #[test]
    fn split_gram_matches_monolithic() {
        // columns of X = [[1,0,2,1],[0,1,1,3]]
        let x = [vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 1.0], vec![1.0, 3.0]];
        let mut acc = MomentAccumulator::new(2, 1);
        acc.accumulate_batch(&cols(2, &x[..2]), &cols(2, &x[..2]), &[0, 0]).unwrap();
        acc.accumulate_batch(&cols(2, &x[2..]), &cols(2, &x[2..]), &[0, 0]).unwrap();
        assert_eq!(acc.c11(), &array![[6.0, 5.0], [5.0, 11.0]]);

        let mut mono = MomentAccumulator::new(2, 1);
        mono.accumulate_batch(&cols(2, &x), &cols(2, &x), &[0; 4]).unwrap();
        assert_eq!(mono.c11(), acc.c11());
    }

    #[test]
    fn zero_batch_only_counts() {
        let z = cols(3, &[vec![0.0; 3], vec![0.0; 3]]);
        let mut acc = MomentAccumulator::new(3, 2);
        acc.accumulate_batch(&z, &z, &[0, 1]).unwrap();
        let empty = MomentAccumulator::new(3, 2);
        assert_eq!(acc.c11(), empty.c11());
        assert_eq!(acc.class_sums(), empty.class_sums());
        assert_eq!(acc.patch_count(), 2);
        assert_eq!(acc.class_patch_count(), &[1, 1]);
    }

    #[test]
    fn shape_errors() {
        let a = cols(2, &[vec![1.0, 2.0]]);
        let b = cols(3, &[vec![1.0, 2.0, 3.0]]);
        let mut acc = MomentAccumulator::new(2, 1);
        assert!(acc.accumulate_batch(&a, &b, &[0]).is_err());
        assert!(acc.accumulate_batch(&a, &a, &[0, 0]).is_err());
        assert!(acc.accumulate_batch(&a, &a, &[1]).is_err());
        assert!(MomentAccumulator::new(2, 1).merge(&MomentAccumulator::new(3, 1)).is_err());
        assert!(MomentAccumulator::new(2, 1).merge(&MomentAccumulator::new(2, 2)).is_err());
        assert!(acc.finalize(-1.0).is_err());
    }

    #[test]
    fn merge_identity_and_commutativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mk = |rng: &mut ChaCha8Rng| {
            let x: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let y: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let mut acc = MomentAccumulator::new(4, 3);
            acc.accumulate_batch(&cols(4, &x), &cols(4, &y), &[0, 1, 2, 0, 1, 2]).unwrap();
            acc
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        assert_eq!(a.clone().merge(&MomentAccumulator::new(4, 3)).unwrap(), a);
        assert_eq!(a.clone().merge(&b).unwrap(), b.clone().merge(&a).unwrap());
    }

    #[test]
    fn single_class_has_no_between_term() {
        let x = [vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.0]];
        let y = [vec![0.0, 1.0], vec![2.0, 2.0], vec![-1.0, 1.0]];
        let mut acc = MomentAccumulator::new(2, 1);
        acc.accumulate_batch(&cols(2, &x), &cols(2, &y), &[0, 0, 0]).unwrap();
        let m = acc.finalize(0.0).unwrap();
        assert!(m.cb.iter().all(|&v| v == 0.0));
        assert_eq!(m.ctilde, m.cw);
        assert_eq!(m.c11, *acc.c11());
    }

    #[test]
    fn two_class_expansion() {
        let x = [vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.0], vec![-2.0, 1.0]];
        let y = [vec![0.0, 1.0], vec![2.0, 2.0], vec![-1.0, 1.0], vec![1.0, -3.0]];
        let labels = [0, 1, 0, 1];
        let mut acc = MomentAccumulator::new(2, 2);
        acc.accumulate_batch(&cols(2, &x), &cols(2, &y), &labels).unwrap();
        let m = acc.finalize(0.0).unwrap();
        // class sums by hand
        let s1a = array![4.0, 2.0];
        let s2a = array![-1.0, 2.0];
        let s1b = array![-1.5, 0.0];
        let s2b = array![3.0, -1.0];
        let cw = outer(&s1a, &s2a) + outer(&s1b, &s2b);
        let cb = outer(&s1a, &s2b) + outer(&s1b, &s2a);
        assert!(rel_err(&m.cw, &cw) < 1e-15);
        assert!(rel_err(&m.cb, &cb) < 1e-15);
        assert!(rel_err(&m.ctilde, &(&cw - &cb)) < 1e-15);
    }

    #[test]
    fn ridge_is_relative_to_trace() {
        let x = [vec![2.0, 0.0], vec![0.0, 4.0]];
        let mut acc = MomentAccumulator::new(2, 1);
        acc.accumulate_batch(&cols(2, &x), &cols(2, &x), &[0, 0]).unwrap();
        let m = acc.finalize(0.5).unwrap();
        // trace 20, dim 2 → shift 5
        assert_eq!(m.c11, array![[9.0, 0.0], [0.0, 21.0]]);
    }

    #[test]
    fn sample_and_column_labels_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = PatchGeometry::same(3, 3);
        let planes: Vec<ImagePlane> = (0..5)
            .map(|_| ImagePlane::from_vec(4, 4, (0..16).map(|_| rng.random()).collect()).unwrap())
            .collect();
        let labels = [0, 1, 1, 0, 1];
        let mut p = PatchMatrix::empty(9, (4, 4));
        for (k, pl) in planes.iter().enumerate() {
            p.push_plane(pl, &g, true, k).unwrap();
        }
        let col_labels: Vec<usize> = (0..p.cols()).map(|c| labels[p.origin(c).sample]).collect();
        let mut a = MomentAccumulator::new(9, 2);
        a.accumulate_batch(&p, &p, &col_labels).unwrap();
        let mut b = MomentAccumulator::new(9, 2);
        b.accumulate_samples(&p, &p, &labels).unwrap();
        assert_eq!(a.patch_count(), b.patch_count());
        assert_eq!(a.class_patch_count(), b.class_patch_count());
        let fa = a.finalize(0.0).unwrap();
        let fb = b.finalize(0.0).unwrap();
        assert!(rel_err(&fa.cw, &fb.cw) < 1e-12);
        assert_eq!(fa.c11, fb.c11);
    }

    #[test]
    fn deterministic_reduction_is_thread_count_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batches: Vec<(PatchMatrix, PatchMatrix, Vec<usize>)> = (0..11)
            .map(|_| {
                let x: Vec<Vec<f64>> = (0..20).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
                let y: Vec<Vec<f64>> = (0..20).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
                let l = (0..20).map(|_| rng.random_range(0..3)).collect();
                (cols(5, &x), cols(5, &y), l)
            })
            .collect();
        let run = |threads, deterministic| {
            let exec = ExecSettings { threads, deterministic };
            reduce_batches(batches.len(), 5, 3, &exec, |b, acc| {
                let (x, y, l) = &batches[b];
                acc.accumulate_batch(x, y, l)
            })
            .unwrap()
        };
        let reference = run(1, true);
        for t in [2, 3, 8] {
            assert_eq!(run(t, true), reference);
        }
        let fast = run(4, false);
        assert!(rel_err(fast.c11(), reference.c11()) < 1e-12);
    }
}
