//! Two-dimensional coverage regions for parameter pairs.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dram::Chain;
use crate::error::{invalid, Error, Result};
use crate::io;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    GaussianEllipse,
    PossoloHdr,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center: [f64; 2],
    /// Semi-axis lengths, major first.
    pub semi_axes: [f64; 2],
    /// Angle of the major axis from the x axis, radians.
    pub angle: f64,
    cov: [[f64; 2]; 2],
    quantile: f64,
}

impl Ellipse {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        mahalanobis_sq(&self.cov, self.center, p) <= self.quantile
    }

    pub fn boundary(&self, n: usize) -> Vec<[f64; 2]> {
        let (c, s) = (self.angle.cos(), self.angle.sin());
        (0..=n)
            .map(|k| {
                let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                let (a, b) = (self.semi_axes[0] * t.cos(), self.semi_axes[1] * t.sin());
                [self.center[0] + c * a - s * b, self.center[1] + s * a + c * b]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RegionGeometry {
    Ellipse(Ellipse),
    /// Closed polygons (first vertex repeated last); a point is inside if it
    /// lies inside an odd number of them.
    Polygons(Vec<Vec<[f64; 2]>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRegion {
    pub kind: RegionKind,
    pub level: f64,
    pub geometry: RegionGeometry,
}

impl CoverageRegion {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        match &self.geometry {
            RegionGeometry::Ellipse(e) => e.contains(p),
            RegionGeometry::Polygons(polys) => polys.iter().filter(|poly| point_in_polygon(poly, p)).count() % 2 == 1,
        }
    }

    pub fn polygons(&self) -> Vec<Vec<[f64; 2]>> {
        match &self.geometry {
            RegionGeometry::Ellipse(e) => vec![e.boundary(180)],
            RegionGeometry::Polygons(p) => p.clone(),
        }
    }

    /// Plot-ready vertex list: `polygon,x,y`.
    pub fn write_csv(&self, path: &Path, x_name: &str, y_name: &str) -> Result<()> {
        let header = ["polygon".to_string(), x_name.to_string(), y_name.to_string()];
        let rows: Vec<Vec<String>> = self
            .polygons()
            .iter()
            .enumerate()
            .flat_map(|(k, poly)| poly.iter().map(move |v| vec![k.to_string(), io::fmt_f64(v[0]), io::fmt_f64(v[1])]))
            .collect();
        io::write_rows(path, &header, &rows)
    }
}

fn mahalanobis_sq(cov: &[[f64; 2]; 2], c: [f64; 2], p: [f64; 2]) -> f64 {
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
    (cov[1][1] * dx * dx - 2.0 * cov[0][1] * dx * dy + cov[0][0] * dy * dy) / det
}

fn point_in_polygon(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Sample mean and covariance of a pair, rejecting (near-)singular pairs.
fn moments(x: &[f64], y: &[f64]) -> Result<([f64; 2], [[f64; 2]; 2])> {
    let (mx, my) = (stats::mean(x), stats::mean(y));
    let n = x.len() as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    let cov = [[sxx / (n - 1.0), sxy / (n - 1.0)], [sxy / (n - 1.0), syy / (n - 1.0)]];
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[0][1];
    if !(cov[0][0] > 0.0 && cov[1][1] > 0.0) || det <= 1e-12 * cov[0][0] * cov[1][1] {
        return Err(Error::SingularCovariance(format!("pair covariance {cov:?}")));
    }
    Ok(([mx, my], cov))
}

/// Coverage region of two paired samples.
pub fn coverage_region_xy(x: &[f64], y: &[f64], level: f64, kind: RegionKind) -> Result<CoverageRegion> {
    if x.len() != y.len() {
        return invalid("coverage samples differ in length");
    }
    if x.len() < 200 {
        return invalid(format!("coverage region needs at least 200 draws, got {}", x.len()));
    }
    if !(level > 0.0 && level < 1.0) {
        return invalid(format!("coverage level must lie in (0, 1), got {level}"));
    }
    let (center, cov) = moments(x, y)?;
    let geometry = match kind {
        RegionKind::GaussianEllipse => RegionGeometry::Ellipse(gaussian_ellipse(center, cov, level)),
        RegionKind::PossoloHdr => RegionGeometry::Polygons(kde_hdr(x, y, center, cov, level)?),
    };
    Ok(CoverageRegion { kind, level, geometry })
}

/// Coverage region of parameters `i` and `j` of a chain.
pub fn coverage_region(chain: &Chain, i: usize, j: usize, level: f64, kind: RegionKind) -> Result<CoverageRegion> {
    if i >= chain.dim() || j >= chain.dim() || i == j {
        return invalid(format!("invalid parameter pair ({i}, {j})"));
    }
    coverage_region_xy(&chain.column(i), &chain.column(j), level, kind)
}

fn gaussian_ellipse(center: [f64; 2], cov: [[f64; 2]; 2], level: f64) -> Ellipse {
    let q = -2.0 * (1.0 - level).ln();
    let (a, b, c) = (cov[0][0], cov[0][1], cov[1][1]);
    let tr = a + c;
    let disc = ((a - c) * (a - c) / 4.0 + b * b).sqrt();
    let (l1, l2) = (tr / 2.0 + disc, tr / 2.0 - disc);
    let angle = 0.5 * (2.0 * b).atan2(a - c);
    Ellipse { center, semi_axes: [(q * l1).sqrt(), (q * l2).sqrt()], angle, cov, quantile: q }
}

const HDR_GRID: usize = 200;

/// Highest-density region of a Gaussian KDE, computed in whitened coordinates.
fn kde_hdr(x: &[f64], y: &[f64], center: [f64; 2], cov: [[f64; 2]; 2], level: f64) -> Result<Vec<Vec<[f64; 2]>>> {
    let l11 = cov[0][0].sqrt();
    let l21 = cov[0][1] / l11;
    let l22 = (cov[1][1] - l21 * l21).sqrt();
    let whiten = |p: [f64; 2]| {
        let u = (p[0] - center[0]) / l11;
        [u, (p[1] - center[1] - l21 * u) / l22]
    };
    let color = |w: [f64; 2]| [center[0] + l11 * w[0], center[1] + l21 * w[0] + l22 * w[1]];
    let pts: Vec<[f64; 2]> = x.iter().zip(y).map(|(a, b)| whiten([*a, *b])).collect();
    let n = pts.len();
    let h = (n as f64).powf(-1.0 / 6.0);

    let lo = [pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min), pts.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min)];
    let hi = [
        pts.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max),
        pts.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max),
    ];
    let g = HDR_GRID;
    let origin = [lo[0] - 4.0 * h, lo[1] - 4.0 * h];
    let step = [(hi[0] - lo[0] + 8.0 * h) / (g - 1) as f64, (hi[1] - lo[1] + 8.0 * h) / (g - 1) as f64];

    let mut bins = vec![0.0; g * g];
    for p in &pts {
        let fx = (p[0] - origin[0]) / step[0];
        let fy = (p[1] - origin[1]) / step[1];
        let (i, j) = ((fx.floor() as usize).min(g - 2), (fy.floor() as usize).min(g - 2));
        let (tx, ty) = (fx - i as f64, fy - j as f64);
        bins[i * g + j] += (1.0 - tx) * (1.0 - ty);
        bins[(i + 1) * g + j] += tx * (1.0 - ty);
        bins[i * g + j + 1] += (1.0 - tx) * ty;
        bins[(i + 1) * g + j + 1] += tx * ty;
    }
    let kernel = |d: f64| -> Vec<f64> {
        let half = (4.0 * h / d).ceil() as isize;
        (-half..=half).map(|k| (-0.5 * (k as f64 * d / h).powi(2)).exp()).collect()
    };
    let (kx, ky) = (kernel(step[0]), kernel(step[1]));
    let mut tmp = vec![0.0; g * g];
    let hx = (kx.len() / 2) as isize;
    for i in 0..g {
        for (k, w) in kx.iter().enumerate() {
            let src = i as isize + k as isize - hx;
            if src < 0 || src >= g as isize {
                continue;
            }
            let src = src as usize;
            for j in 0..g {
                tmp[i * g + j] += w * bins[src * g + j];
            }
        }
    }
    let mut dens = vec![0.0; g * g];
    let hy = (ky.len() / 2) as isize;
    for i in 0..g {
        for j in 0..g {
            let mut s = 0.0;
            for (k, w) in ky.iter().enumerate() {
                let src = j as isize + k as isize - hy;
                if src >= 0 && src < g as isize {
                    s += w * tmp[i * g + src as usize];
                }
            }
            dens[i * g + j] = s / (n as f64 * 2.0 * std::f64::consts::PI * h * h);
        }
    }
    for k in 0..g {
        dens[k] = 0.0;
        dens[(g - 1) * g + k] = 0.0;
        dens[k * g] = 0.0;
        dens[k * g + g - 1] = 0.0;
    }
    let at = |p: [f64; 2]| {
        let fx = (p[0] - origin[0]) / step[0];
        let fy = (p[1] - origin[1]) / step[1];
        let (i, j) = ((fx.floor() as usize).min(g - 2), (fy.floor() as usize).min(g - 2));
        let (tx, ty) = (fx - i as f64, fy - j as f64);
        dens[i * g + j] * (1.0 - tx) * (1.0 - ty)
            + dens[(i + 1) * g + j] * tx * (1.0 - ty)
            + dens[i * g + j + 1] * (1.0 - tx) * ty
            + dens[(i + 1) * g + j + 1] * tx * ty
    };
    let sample_density: Vec<f64> = pts.iter().map(|p| at(*p)).collect();
    let threshold = stats::quantile(&sample_density, 1.0 - level);

    let contours = marching_squares(&dens, g, threshold);
    if contours.is_empty() {
        return Err(Error::Domain("density contour is empty".into()));
    }
    Ok(contours
        .into_iter()
        .map(|poly| {
            poly.into_iter().map(|(fi, fj)| color([origin[0] + fi * step[0], origin[1] + fj * step[1]])).collect()
        })
        .collect())
}

/// Closed iso-lines of `values` (row-major, `g` by `g`) at `level`, in grid units.
fn marching_squares(values: &[f64], g: usize, level: f64) -> Vec<Vec<(f64, f64)>> {
    let v = |i: usize, j: usize| values[i * g + j];
    let inside = |i: usize, j: usize| v(i, j) >= level;
    // Edge ids: horizontal edge (i,j)-(i+1,j) -> 2*(i*g+j); vertical edge (i,j)-(i,j+1) -> 2*(i*g+j)+1.
    let h_edge = |i: usize, j: usize| 2 * (i * g + j);
    let v_edge = |i: usize, j: usize| 2 * (i * g + j) + 1;
    let point = |id: usize| -> (f64, f64) {
        let cell = id / 2;
        let (i, j) = (cell / g, cell % g);
        let (a, b, (bi, bj)) = if id % 2 == 0 { (v(i, j), v(i + 1, j), (i + 1, j)) } else { (v(i, j), v(i, j + 1), (i, j + 1)) };
        let t = if b == a { 0.5 } else { ((level - a) / (b - a)).clamp(0.0, 1.0) };
        (i as f64 + t * (bi - i) as f64, j as f64 + t * (bj - j) as f64)
    };

    let mut segments: Vec<(usize, usize)> = Vec::new();
    for i in 0..g - 1 {
        for j in 0..g - 1 {
            let c = [inside(i, j), inside(i + 1, j), inside(i + 1, j + 1), inside(i, j + 1)];
            let e = [h_edge(i, j), v_edge(i + 1, j), h_edge(i, j + 1), v_edge(i, j)];
            let crossing: Vec<usize> = (0..4).filter(|&k| c[k] != c[(k + 1) % 4]).map(|k| e[k]).collect();
            match crossing.len() {
                2 => segments.push((crossing[0], crossing[1])),
                4 => {
                    let center = 0.25 * (v(i, j) + v(i + 1, j) + v(i + 1, j + 1) + v(i, j + 1)) >= level;
                    // Corner k sits between edges e[(k+3)%4] and e[k].
                    let cut = |k: usize| (e[(k + 3) % 4], e[k]);
                    let lone = if c[0] == center { [1, 3] } else { [0, 2] };
                    segments.push(cut(lone[0]));
                    segments.push(cut(lone[1]));
                }
                _ => {}
            }
        }
    }

    let mut by_edge: HashMap<usize, Vec<usize>> = HashMap::new();
    for (k, &(a, b)) in segments.iter().enumerate() {
        by_edge.entry(a).or_default().push(k);
        by_edge.entry(b).or_default().push(k);
    }
    let mut used = vec![false; segments.len()];
    let mut out = Vec::new();
    for start in 0..segments.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let (first, mut cur) = segments[start];
        let mut ids = vec![first, cur];
        while cur != first {
            let next = by_edge[&cur].iter().copied().find(|&s| !used[s]);
            let Some(s) = next else { break };
            used[s] = true;
            let (a, b) = segments[s];
            cur = if a == cur { b } else { a };
            ids.push(cur);
        }
        if ids.len() >= 4 {
            out.push(ids.into_iter().map(point).collect());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand_distr::{Distribution, StandardNormal};

    fn bivariate(n: usize, rho: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = stream(seed, "bvn", 0);
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            x.push(a);
            y.push(rho * a + (1.0 - rho * rho).sqrt() * b);
        }
        (x, y)
    }

    fn fraction_inside(r: &CoverageRegion, x: &[f64], y: &[f64]) -> f64 {
        x.iter().zip(y).filter(|(a, b)| r.contains([**a, **b])).count() as f64 / x.len() as f64
    }

    #[test]
    fn standard_normal_ellipse_axes() {
        let (x, y) = bivariate(100_000, 0.0, 1);
        let r = coverage_region_xy(&x, &y, 0.95, RegionKind::GaussianEllipse).unwrap();
        let RegionGeometry::Ellipse(e) = r.geometry else { panic!("expected ellipse") };
        let target = 5.991f64.sqrt();
        for a in e.semi_axes {
            assert!((a / target - 1.0).abs() < 0.03, "axis {a}");
        }
        assert!((fraction_inside(&r, &x, &y) - 0.95).abs() < 0.01);
    }

    #[test]
    fn hdr_encloses_the_requested_mass() {
        let (x, y) = bivariate(100_000, 0.0, 2);
        let r = coverage_region_xy(&x, &y, 0.95, RegionKind::PossoloHdr).unwrap();
        let f = fraction_inside(&r, &x, &y);
        assert!((0.93..=0.97).contains(&f), "inside fraction {f}");
    }

    #[test]
    fn hdr_follows_correlation() {
        let (x, y) = bivariate(20_000, 0.8, 3);
        let r = coverage_region_xy(&x, &y, 0.9, RegionKind::PossoloHdr).unwrap();
        let f = fraction_inside(&r, &x, &y);
        assert!((0.88..=0.92).contains(&f), "inside fraction {f}");
        assert!(r.contains([1.5, 1.5]));
        assert!(!r.contains([1.5, -1.5]));
        for poly in r.polygons() {
            assert_eq!(poly.first(), poly.last());
        }
    }

    #[test]
    fn perfectly_correlated_pair_is_singular() {
        let (x, _) = bivariate(500, 0.0, 4);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!(matches!(
            coverage_region_xy(&x, &y, 0.95, RegionKind::GaussianEllipse),
            Err(Error::SingularCovariance(_))
        ));
    }
}
