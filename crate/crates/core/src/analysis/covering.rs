use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::Serialize;

use crate::error::{Error, Result};

/// Greedy upper bound on the number of `epsilon`-balls (closed, centred at
/// sample points) needed to cover `points`: repeatedly take the centre whose
/// ball holds the most uncovered points, ties to the lowest index.
///
/// The result bounds the covering number of the underlying space when the
/// sample is a fine net of it (spacing well below `epsilon`). Distances within
/// [`TIE`] of `epsilon` count as inside, so lattice ties do not depend on
/// rounding.
pub fn greedy_cover<P, M>(points: &[P], metric: M, epsilon: f64) -> usize
where
    M: Fn(&P, &P) -> f64,
{
    lazy_greedy(points.len(), points.len(), |i, out| {
        out.extend(
            (0..points.len())
                .filter(|&j| metric(&points[i], &points[j]) <= epsilon + TIE)
                .map(|j| (j, j + 1)),
        );
    })
}

pub const TIE: f64 = 1e-12;

/// Max-coverage greedy set cover of `n_targets` items by candidate sets,
/// evaluated lazily since gains only shrink as items get covered. `members`
/// lists a candidate's items as half-open index ranges.
fn lazy_greedy<F>(n_targets: usize, n_candidates: usize, mut members: F) -> usize
where
    F: FnMut(usize, &mut Vec<(usize, usize)>),
{
    if n_targets == 0 {
        return 0;
    }
    let mut covered = Bitset::new(n_targets);
    let mut buf = Vec::new();
    let mut gain = |c: usize, covered: &Bitset, buf: &mut Vec<(usize, usize)>| {
        buf.clear();
        members(c, buf);
        buf.iter().map(|&(lo, hi)| covered.count_unset(lo, hi)).sum::<usize>()
    };
    let mut heap: BinaryHeap<(usize, Reverse<usize>)> = (0..n_candidates)
        .map(|c| (gain(c, &covered, &mut buf), Reverse(c)))
        .filter(|&(g, _)| g > 0)
        .collect();
    let mut remaining = n_targets;
    let mut centres = 0;
    while remaining > 0 {
        let Some((stale, Reverse(c))) = heap.pop() else {
            // Candidates do not cover every target.
            return usize::MAX;
        };
        let fresh = gain(c, &covered, &mut buf);
        if fresh < stale {
            // Every other entry's true gain is at most its stale key, so a
            // refreshed entry that stays on top is the exact maximum.
            if fresh > 0 {
                heap.push((fresh, Reverse(c)));
            }
            continue;
        }
        for &(lo, hi) in &buf {
            remaining -= covered.set_range(lo, hi);
        }
        centres += 1;
    }
    centres
}

struct Bitset {
    words: Vec<u64>,
}

impl Bitset {
    fn new(n: usize) -> Self {
        Self {
            words: vec![0; n.div_ceil(64)],
        }
    }

    fn mask(lo: usize, hi: usize) -> u64 {
        // bits lo..hi of one word, 0 <= lo < hi <= 64
        let upper = if hi == 64 { u64::MAX } else { (1u64 << hi) - 1 };
        upper & !((1u64 << lo) - 1)
    }

    fn for_words(lo: usize, hi: usize, mut f: impl FnMut(usize, u64)) {
        let mut i = lo;
        while i < hi {
            let w = i / 64;
            let end = ((w + 1) * 64).min(hi);
            f(w, Self::mask(i - w * 64, end - w * 64));
            i = end;
        }
    }

    fn count_unset(&self, lo: usize, hi: usize) -> usize {
        let mut n = 0;
        Self::for_words(lo, hi, |w, m| n += (!self.words[w] & m).count_ones() as usize);
        n
    }

    /// Sets `lo..hi`, returning how many bits were newly set.
    fn set_range(&mut self, lo: usize, hi: usize) -> usize {
        let mut n = 0;
        let words = &mut self.words;
        Self::for_words(lo, hi, |w, m| {
            n += (!words[w] & m).count_ones() as usize;
            words[w] |= m;
        });
        n
    }
}

/// Closed-form covering number of an interval of `length` by intervals of
/// radius `radius`.
pub fn interval_cover_size(length: f64, radius: f64) -> usize {
    ((length / (2.0 * radius)).ceil() as usize).max(1)
}

/// Integer lattice of spacing `h` inside `B^d(radius)`, `d` in {1, 2}.
struct BallLattice {
    dim: usize,
    m: i64,
    h: f64,
    /// Lattice offset -> dense index, `usize::MAX` outside the ball.
    slot: Vec<usize>,
    /// First and last in-ball column of each row.
    row_extent: Vec<(i64, i64)>,
    points: Vec<Vec<f64>>,
}

impl BallLattice {
    fn new(dim: usize, radius: f64, h: f64) -> Result<Self> {
        if !(dim == 1 || dim == 2) {
            return Err(Error::Contract(format!(
                "lattice covers support d in {{1, 2}}, got {dim}"
            )));
        }
        let m = (radius / h + 1e-9).floor() as i64;
        let side = (2 * m + 1) as usize;
        let cells = side.pow(dim as u32);
        let mut slot = vec![usize::MAX; cells];
        let mut points = Vec::new();
        for (c, s) in slot.iter_mut().enumerate() {
            let x = Self::coords(dim, m, h, c);
            if crate::rng::norm(&x) <= radius + 1e-12 {
                *s = points.len();
                points.push(x);
            }
        }
        let rows = if dim == 1 { 1 } else { side };
        let row_extent = (0..rows)
            .map(|r| {
                let cols: Vec<i64> = (0..side)
                    .filter(|&i| slot[r * side * (dim - 1) + i] != usize::MAX)
                    .map(|i| i as i64 - m)
                    .collect();
                (cols.first().copied().unwrap_or(1), cols.last().copied().unwrap_or(0))
            })
            .collect();
        Ok(Self {
            dim,
            m,
            h,
            slot,
            row_extent,
            points,
        })
    }

    fn coords(dim: usize, m: i64, h: f64, cell: usize) -> Vec<f64> {
        let side = (2 * m + 1) as usize;
        let mut c = cell;
        let mut x = vec![0.0; dim];
        for v in x.iter_mut() {
            *v = ((c % side) as i64 - m) as f64 * h;
            c /= side;
        }
        x
    }

    /// Dense index ranges of the lattice points within Euclidean distance
    /// `reach` of `centre`, one range per lattice row.
    fn disc_spans(&self, centre: &[f64], reach: f64, out: &mut Vec<(usize, usize)>) {
        let side = (2 * self.m + 1) as usize;
        let rows: Vec<(i64, f64)> = if self.dim == 1 {
            vec![(0, reach)]
        } else {
            let lo = (((centre[1] - reach) / self.h - 1e-9).ceil() as i64).max(-self.m);
            let hi = (((centre[1] + reach) / self.h + 1e-9).floor() as i64).min(self.m);
            (lo..=hi)
                .filter_map(|j| {
                    let dy = j as f64 * self.h - centre[1];
                    let w2 = reach * reach - dy * dy;
                    (w2 > -1e-9 * reach * reach).then(|| (j, w2.max(0.0).sqrt()))
                })
                .collect()
        };
        let inside = |i: i64, j: i64| {
            let dx = i as f64 * self.h - centre[0];
            let dy = if self.dim == 1 { 0.0 } else { j as f64 * self.h - centre[1] };
            (dx * dx + dy * dy).sqrt() <= reach
        };
        for (j, w) in rows {
            let (row, (first, last)) = if self.dim == 1 {
                (0, self.row_extent[0])
            } else {
                (side * (j + self.m) as usize, self.row_extent[(j + self.m) as usize])
            };
            // Widen by a rounding margin, then trim with the exact test.
            let mut lo = (((centre[0] - w) / self.h - 1e-9).ceil() as i64).max(first);
            let mut hi = (((centre[0] + w) / self.h + 1e-9).floor() as i64).min(last);
            while lo <= hi && !inside(lo, j) {
                lo += 1;
            }
            while hi >= lo && !inside(hi, j) {
                hi -= 1;
            }
            if lo <= hi {
                let a = self.slot[row + (lo + self.m) as usize];
                let b = self.slot[row + (hi + self.m) as usize];
                out.push((a, b + 1));
            }
        }
    }
}

/// Greedy cover of `B^d(radius)` by Euclidean balls of radius `ball`, on a
/// lattice of spacing `h`; closed form in one dimension.
pub fn ball_cover_size(dim: usize, radius: f64, ball: f64, h: f64) -> Result<usize> {
    if dim == 1 {
        return Ok(interval_cover_size(2.0 * radius, ball));
    }
    let lattice = BallLattice::new(dim, radius, h)?;
    let n = lattice.points.len();
    Ok(lazy_greedy(n, n, |c, out| {
        lattice.disc_spans(&lattice.points[c], ball + TIE, out);
    }))
}

/// Lattice proxy of `[0, T] x B^d(R)`, stored time-major.
struct ProductLattice {
    space: BallLattice,
    times: Vec<f64>,
}

impl ProductLattice {
    fn new(dim: usize, radius: f64, horizon: f64, h: f64) -> Result<Self> {
        let space = BallLattice::new(dim, radius, h)?;
        let nt = (horizon / h + 1e-9).floor() as usize + 1;
        let times = (0..nt).map(|k| (k as f64 * h).min(horizon)).collect();
        Ok(Self { space, times })
    }

    fn len(&self) -> usize {
        self.times.len() * self.space.points.len()
    }

    /// Index ranges of the points within `rho_OU` distance `eps` of point
    /// `p` at time index `k`.
    fn ball(&self, kc: usize, pc: usize, eps: f64, out: &mut Vec<(usize, usize)>) {
        let np = self.space.points.len();
        let tc = self.times[kc];
        let keep = (-tc).exp();
        let start = out.len();
        for (k, &t) in self.times.iter().enumerate() {
            let gap = (tc - t).abs().sqrt();
            if gap > eps + TIE {
                continue;
            }
            // |e^{-t} x - e^{-t_c} x_c| <= eps - gap
            //   <=>  |x - e^{t - t_c} x_c| <= (eps - gap) e^t
            let grow = t.exp();
            let c: Vec<f64> = self.space.points[pc].iter().map(|v| v * keep * grow).collect();
            let before = out.len();
            self.space.disc_spans(&c, (eps + TIE - gap) * grow, out);
            for r in &mut out[before..] {
                r.0 += k * np;
                r.1 += k * np;
            }
        }
        debug_assert!(out.len() > start);
    }
}

/// Greedy cover of the lattice proxy of `[0, horizon] x B^d(radius)` under
/// `rho_OU`. Ball centres are restricted to a sublattice with roughly
/// `eps / 4` spatial and `eps^2 / 4` temporal spacing (`dense = false`) or
/// range over every proxy point (`dense = true`).
pub fn product_cover_size(
    dim: usize,
    radius: f64,
    horizon: f64,
    epsilon: f64,
    h: f64,
    dense: bool,
) -> Result<usize> {
    let proxy = ProductLattice::new(dim, radius, horizon, h)?;
    let (stride_t, stride_x) = if dense {
        (1, 1)
    } else {
        (
            ((epsilon * epsilon / (4.0 * h)).floor() as i64).max(1),
            ((epsilon / (4.0 * h)).floor() as i64).max(1),
        )
    };
    let on_sublattice = |x: &[f64]| {
        x.iter()
            .all(|v| ((v / h).round() as i64).rem_euclid(stride_x) == 0)
    };
    let mut centres = Vec::new();
    for k in (0..proxy.times.len()).filter(|k| *k as i64 % stride_t == 0) {
        for (p, x) in proxy.space.points.iter().enumerate() {
            if on_sublattice(x) {
                centres.push(k * proxy.space.points.len() + p);
            }
        }
    }
    let np = proxy.space.points.len();
    let size = lazy_greedy(proxy.len(), centres.len(), |c, out| {
        let i = centres[c];
        proxy.ball(i / np, i % np, epsilon, out);
    });
    if size == usize::MAX {
        return Err(Error::Contract(format!(
            "centre sublattice does not cover the proxy at eps = {epsilon}"
        )));
    }
    Ok(size)
}

/// One line of the covering comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoverReport {
    pub epsilon: f64,
    /// Greedy cover of the product under `rho_OU`.
    pub cover_size: usize,
    /// `N([0,T], eps^2/4) * N(B^d(R), eps/2)`.
    pub product_bound: usize,
    pub holds: bool,
    pub interval_factor: usize,
    pub ball_factor: usize,
    pub resolution: f64,
    pub refined: bool,
}

/// Compares the greedy cover of `[0, T] x B^d(R)` under `rho_OU` with the
/// product of the interval cover at `eps^2 / 4` and the ball cover at `eps / 2`.
/// Ball centres for the product come from a sublattice of the proxy; a failing
/// comparison is retried once with every proxy point as a candidate centre.
pub fn verify_covering_product(
    dim: usize,
    radius: f64,
    horizon: f64,
    epsilons: &[f64],
    resolution: f64,
) -> Result<Vec<CoverReport>> {
    epsilons
        .iter()
        .map(|&eps| {
            if !(eps > 0.0 && eps <= 1.0) {
                return Err(Error::Contract(format!("epsilon must lie in (0, 1], got {eps}")));
            }
            let mut report = cover_report(dim, radius, horizon, eps, resolution, false)?;
            if !report.holds {
                log::warn!("covering comparison failed at eps = {eps}; retrying with all centres");
                report = cover_report(dim, radius, horizon, eps, resolution, true)?;
            }
            Ok(report)
        })
        .collect()
}

fn cover_report(dim: usize, radius: f64, horizon: f64, eps: f64, h: f64, refined: bool) -> Result<CoverReport> {
    let cover_size = product_cover_size(dim, radius, horizon, eps, h, refined)?;
    let interval_factor = interval_cover_size(horizon, eps * eps / 4.0);
    let ball_factor = ball_cover_size(dim, radius, eps / 2.0, h)?;
    let product_bound = interval_factor * ball_factor;
    Ok(CoverReport {
        epsilon: eps,
        cover_size,
        product_bound,
        holds: cover_size <= product_bound,
        interval_factor,
        ball_factor,
        resolution: h,
        refined,
    })
}
