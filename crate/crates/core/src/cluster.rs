//! Cosine clustering of static user vectors into one-hot conditions.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::data::Dataset;
use crate::rng;
use crate::tensor::{dot, Tensor};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClusterError {
    #[error("zero-norm vector (row {0})")]
    ZeroNorm(usize),
    #[error("need 1 <= k <= {users}, got {k}")]
    K { k: usize, users: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("embedding file: {0}")]
    Ingest(String),
}

fn norm(v: &[Scalar]) -> Scalar {
    libm::sqrt(dot(v, v))
}

fn normalized(v: &[Scalar]) -> Option<Vec<Scalar>> {
    let n = norm(v);
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

/// Index of the center with the highest cosine to `u`, lowest index on ties.
pub fn assign_index(u: &[Scalar], centers: &Tensor) -> Result<usize, ClusterError> {
    let un = norm(u);
    if !(un > 0.0) {
        return Err(ClusterError::ZeroNorm(0));
    }
    let mut best = (0, Scalar::NEG_INFINITY);
    for j in 0..centers.rows() {
        let z = centers.row(j);
        if z.len() != u.len() {
            return Err(ClusterError::Dimension(z.len(), u.len()));
        }
        let zn = norm(z);
        if !(zn > 0.0) {
            return Err(ClusterError::ZeroNorm(j));
        }
        let cos = dot(u, z) / (un * zn);
        if cos > best.1 {
            best = (j, cos);
        }
    }
    Ok(best.0)
}

pub fn one_hot(index: usize, k: usize) -> Vec<Scalar> {
    let mut c = vec![0.0; k];
    c[index] = 1.0;
    c
}

/// One-hot condition for `u`.
pub fn assign(u: &[Scalar], centers: &Tensor) -> Result<Vec<Scalar>, ClusterError> {
    Ok(one_hot(assign_index(u, centers)?, centers.rows()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// Unit-norm centers, `k×d_u`.
    pub centers: Tensor,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centers.rows()
    }

    pub fn condition(&self, user: usize) -> Vec<Scalar> {
        one_hot(self.assignments[user], self.k())
    }
}

fn normalize_rows(users: &Tensor) -> Result<Vec<Vec<Scalar>>, ClusterError> {
    (0..users.rows()).map(|i| normalized(users.row(i)).ok_or(ClusterError::ZeroNorm(i))).collect()
}

/// Spherical k-means with k-means++ seeding.
pub fn fit_centers(users: &Tensor, k: usize, iterations: usize, seed: u64) -> Result<ClusterModel, ClusterError> {
    let n = users.rows();
    if k == 0 || k > n {
        return Err(ClusterError::K { k, users: n });
    }
    let points = normalize_rows(users)?;
    let mut rng = rng::stream(seed, 0xc1, 0);
    let dist = |a: &[Scalar], b: &[Scalar]| 1.0 - dot(a, b);
    let mut centers: Vec<Vec<Scalar>> = vec![points[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d: Vec<Scalar> = points
            .iter()
            .map(|p| centers.iter().map(|c| dist(p, c)).fold(Scalar::INFINITY, Scalar::min).max(0.0))
            .collect();
        let total: Scalar = d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<Scalar>() * total;
            let mut chosen = n - 1;
            for (i, w) in d.iter().enumerate() {
                if u < *w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
    }
    refine(&points, centers, iterations)
}

/// Continues spherical k-means from existing centers.
pub fn refit(users: &Tensor, centers: &Tensor, iterations: usize) -> Result<ClusterModel, ClusterError> {
    if centers.cols() != users.cols() {
        return Err(ClusterError::Dimension(centers.cols(), users.cols()));
    }
    let points = normalize_rows(users)?;
    let start = (0..centers.rows())
        .map(|j| normalized(centers.row(j)).ok_or(ClusterError::ZeroNorm(j)))
        .collect::<Result<_, _>>()?;
    refine(&points, start, iterations)
}

fn refine(
    points: &[Vec<Scalar>],
    mut centers: Vec<Vec<Scalar>>,
    iterations: usize,
) -> Result<ClusterModel, ClusterError> {
    let k = centers.len();
    let dim = points[0].len();
    let nearest = |centers: &[Vec<Scalar>], p: &[Scalar]| {
        let mut best = (0, Scalar::NEG_INFINITY);
        for (j, c) in centers.iter().enumerate() {
            let s = dot(p, c);
            if s > best.1 {
                best = (j, s);
            }
        }
        best
    };
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(&centers, p).0).collect();
    let mut iters = 0;
    while iters < iterations {
        iters += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for j in 0..k {
            match (counts[j] > 0).then(|| normalized(&sums[j])).flatten() {
                Some(c) => centers[j] = c,
                None => {
                    // reseed from the point farthest from its own center
                    let far = points
                        .iter()
                        .zip(&assignments)
                        .enumerate()
                        .map(|(i, (p, &a))| (i, dot(p, &centers[a])))
                        .fold((0, Scalar::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
                    centers[j] = points[far.0].clone();
                }
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(&centers, p).0).collect();
        if next == assignments {
            break;
        }
        assignments = next;
    }
    let flat = centers.concat();
    Ok(ClusterModel { centers: Tensor::matrix(k, dim, flat).expect("k×d"), assignments, iterations: iters })
}

/// Rank-`rank` user factors from the binary user–item matrix by subspace iteration.
///
/// Rows are `U·S` of the truncated SVD, so inner products between users are
/// those of the rank-limited interaction matrix.
pub fn svd_user_vectors(dataset: &Dataset, rank: usize, seed: u64) -> Tensor {
    let n = dataset.num_users();
    let v = dataset.num_items();
    let r = rank.min(n).min(v).max(1);
    let rows: Vec<Vec<usize>> = dataset
        .users()
        .iter()
        .map(|u| {
            let mut items = u.items.clone();
            items.sort_unstable();
            items.dedup();
            items
        })
        .collect();
    // A·X for X: v×r, and Aᵀ·Y for Y: n×r with A the n×v binary matrix.
    let a_mul = |x: &[Scalar]| {
        let mut out = vec![0.0; n * r];
        for (u, items) in rows.iter().enumerate() {
            for &i in items {
                for c in 0..r {
                    out[u * r + c] += x[i * r + c];
                }
            }
        }
        out
    };
    let at_mul = |y: &[Scalar]| {
        let mut out = vec![0.0; v * r];
        for (u, items) in rows.iter().enumerate() {
            for &i in items {
                for c in 0..r {
                    out[i * r + c] += y[u * r + c];
                }
            }
        }
        out
    };
    let mut rng = rng::stream(seed, 0x5fd, 0);
    let mut q = rng::normal_vec(&mut rng, v * r);
    orthonormalize(&mut q, v, r);
    for _ in 0..50 {
        let mut y = a_mul(&q);
        orthonormalize(&mut y, n, r);
        q = at_mul(&y);
        orthonormalize(&mut q, v, r);
    }
    // Rayleigh–Ritz on the captured subspace: B = A·Q (n×r), then rotate by
    // the eigenvectors of BᵀB so columns come out in descending order.
    let b = a_mul(&q);
    let mut gram = vec![0.0; r * r];
    for row in b.chunks_exact(r) {
        for i in 0..r {
            for j in 0..r {
                gram[i * r + j] += row[i] * row[j];
            }
        }
    }
    let (_, vecs) = symmetric_eigen(&gram, r);
    let mut out = vec![0.0; n * r];
    for u in 0..n {
        for c in 0..r {
            out[u * r + c] = (0..r).map(|j| b[u * r + j] * vecs[j * r + c]).sum();
        }
    }
    Tensor::matrix(n, r, out).expect("n×r")
}

/// Modified Gram–Schmidt on the columns of a row-major `rows×cols` matrix.
fn orthonormalize(m: &mut [Scalar], rows: usize, cols: usize) {
    for c in 0..cols {
        for p in 0..c {
            let d: Scalar = (0..rows).map(|i| m[i * cols + c] * m[i * cols + p]).sum();
            for i in 0..rows {
                m[i * cols + c] -= d * m[i * cols + p];
            }
        }
        let nrm = libm::sqrt((0..rows).map(|i| m[i * cols + c] * m[i * cols + c]).sum());
        if nrm > 1e-300 {
            for i in 0..rows {
                m[i * cols + c] /= nrm;
            }
        } else {
            for i in 0..rows {
                m[i * cols + c] = 0.0;
            }
        }
    }
}

/// Cyclic Jacobi; eigenvalues descending, eigenvectors as columns.
fn symmetric_eigen(a: &[Scalar], n: usize) -> (Vec<Scalar>, Vec<Scalar>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _ in 0..100 {
        let off: Scalar = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let diag: Scalar = (0..n).map(|i| a[i * n + i] * a[i * n + i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let vals = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (c, &src) in order.iter().enumerate() {
        for k in 0..n {
            vecs[k * n + c] = v[k * n + src];
        }
    }
    (vals, vecs)
}

/// Parsed user embedding file aligned to a dataset's users.
#[derive(Debug, Clone, PartialEq)]
pub struct UserEmbeddings {
    pub vectors: Tensor,
    /// Ids present in the file but not in the dataset.
    pub ignored: Vec<String>,
}

/// Parses `num_users dim` then `user_id v1 … v_dim` lines.
pub fn parse_user_embeddings(text: &str, dataset: &Dataset) -> Result<UserEmbeddings, ClusterError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| ClusterError::Ingest("empty file".into()))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    let [count, dim] = head[..] else {
        return Err(ClusterError::Ingest("header must be \"num_users dim\"".into()));
    };
    let count: usize = count.parse().map_err(|_| ClusterError::Ingest("bad user count".into()))?;
    let dim: usize = dim.parse().map_err(|_| ClusterError::Ingest("bad dimension".into()))?;
    if dim == 0 {
        return Err(ClusterError::Ingest("dimension must be positive".into()));
    }
    let mut rows: BTreeMap<String, Vec<Scalar>> = BTreeMap::new();
    let mut problems = Vec::new();
    for (i, line) in lines {
        let mut tok = line.split_whitespace();
        let id = tok.next().expect("non-empty").to_string();
        let vals: Result<Vec<Scalar>, _> = tok.map(str::parse::<Scalar>).collect();
        match vals {
            Ok(v) if v.len() == dim && v.iter().all(|x| x.is_finite()) => {
                rows.insert(id, v);
            }
            Ok(v) if v.len() != dim => problems.push(format!("line {}: {} values, expected {dim}", i + 1, v.len())),
            Ok(_) => problems.push(format!("line {}: non-finite value", i + 1)),
            Err(_) => problems.push(format!("line {}: unparsable value", i + 1)),
        }
    }
    if rows.len() + problems.len() != count {
        problems.push(format!("header declares {count} users, file has {}", rows.len() + problems.len()));
    }
    let missing: Vec<&str> =
        dataset.users().iter().filter(|u| !rows.contains_key(&u.user)).map(|u| u.user.as_str()).collect();
    if !missing.is_empty() {
        problems.push(format!("missing users: {}", missing.join(", ")));
    }
    if !problems.is_empty() {
        return Err(ClusterError::Ingest(problems.join("; ")));
    }
    let mut data = Vec::with_capacity(dataset.num_users() * dim);
    for u in dataset.users() {
        data.extend_from_slice(&rows.remove(&u.user).expect("checked"));
    }
    let ignored = rows.into_keys().collect();
    Ok(UserEmbeddings { vectors: Tensor::matrix(dataset.num_users(), dim, data).expect("n×d"), ignored })
}

/// Fraction of pairs on which two labelings agree about same/different cluster.
pub fn pair_agreement(a: &[usize], b: &[usize]) -> Scalar {
    let n = a.len().min(b.len());
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            total += 1;
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        agree as Scalar / total as Scalar
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye2() -> Tensor {
        Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn assign_cases() {
        assert_eq!(assign(&[1.0, 0.0], &eye2()).unwrap(), vec![1.0, 0.0]);
        let h = core::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(assign(&[h, h], &eye2()).unwrap(), vec![1.0, 0.0]);
        assert_eq!(assign(&[0.0, 0.0], &eye2()), Err(ClusterError::ZeroNorm(0)));
        assert_eq!(assign(&[0.1, 3.0], &eye2()).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn k_equals_users_gives_a_permutation() {
        let users = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, -0.2]).unwrap();
        let m = fit_centers(&users, 3, 20, 1).unwrap();
        let mut a = m.assignments.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2]);
        assert!(fit_centers(&users, 4, 20, 1).is_err());
    }

    #[test]
    fn separated_blobs() {
        let mut data = Vec::new();
        for i in 0..10 {
            let e = i as Scalar * 0.01;
            data.extend([1.0, e, 0.0]);
            data.extend([0.0, e, 1.0]);
        }
        let users = Tensor::matrix(20, 3, data).unwrap();
        let m = fit_centers(&users, 2, 50, 9).unwrap();
        let truth: Vec<usize> = (0..20).map(|i| i % 2).collect();
        assert_eq!(pair_agreement(&m.assignments, &truth), 1.0);
        assert_eq!(m, fit_centers(&users, 2, 50, 9).unwrap());
        for j in 0..2 {
            assert!((norm(m.centers.row(j)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobi_diagonalizes() {
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 1.0];
        let (vals, vecs) = symmetric_eigen(&a, 3);
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
        for c in 0..3 {
            for r in 0..3 {
                let av: Scalar = (0..3).map(|k| a[r * 3 + k] * vecs[k * 3 + c]).sum();
                assert!((av - vals[c] * vecs[r * 3 + c]).abs() < 1e-10);
            }
        }
    }
}
