//! Synthetic periodic crystal potentials: random lattices rendered as
//! sums of Gaussian bumps, plus the training-view augmentations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::{Pitch, PotentialVolume, Real, Vol};

/// One atom of the unit-cell basis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasisAtom {
    /// Fractional position in [0,1)^3, (depth, height, width) order.
    pub frac: [f64; 3],
    /// Peak phase amplitude in radians.
    pub amplitude: f64,
    /// Isotropic Gaussian width in angstroms.
    pub width: f64,
}

/// Periodic lattice with a Gaussian-bump basis. The c vector points along
/// the depth axis; a and b span the lateral plane with `in_plane_angle`
/// between them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatticeSpec {
    /// (|a|, |b|, |c|) in angstroms.
    pub lattice_lengths: [f64; 3],
    /// Angle between the in-plane a and b vectors, radians.
    pub in_plane_angle: f64,
    pub basis: Vec<BasisAtom>,
}

impl LatticeSpec {
    pub fn validate(&self) -> Result<()> {
        for &l in &self.lattice_lengths {
            if l <= 2.0 || l >= 20.0 {
                return Err(CoreError::InvalidArgument(format!(
                    "lattice length {l} outside (2, 20) angstrom"
                )));
            }
        }
        if self.basis.is_empty() {
            return Err(CoreError::InvalidArgument("basis must be nonempty".into()));
        }
        for atom in &self.basis {
            if atom.amplitude <= 0.0 || atom.width <= 0.0 {
                return Err(CoreError::InvalidArgument(
                    "basis amplitudes and widths must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Sampling ranges for the synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Rendered grid (depth, height, width).
    pub grid: (usize, usize, usize),
    pub pitch: Pitch,
    pub atoms_per_cell: (usize, usize),
    /// Lattice length range in angstroms, within (2, 20).
    pub lattice_range: (f64, f64),
    /// Peak amplitude range in radians.
    pub amplitude_range: (f64, f64),
    /// Gaussian width range in angstroms.
    pub width_range: (f64, f64),
    /// Probability of deleting each atom site.
    pub vacancy_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            grid: (16, 100, 100),
            pitch: Pitch::reference(),
            atoms_per_cell: (1, 3),
            lattice_range: (3.0, 8.0),
            amplitude_range: (0.35, 0.85),
            width_range: (0.28, 0.45),
            vacancy_rate: 0.01,
        }
    }
}

impl SynthConfig {
    /// Smaller grid used by the desk-scale benchmark.
    pub fn toy() -> Self {
        SynthConfig {
            grid: (8, 48, 48),
            lattice_range: (2.8, 6.0),
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.vacancy_rate) {
            return Err(CoreError::InvalidArgument("vacancy_rate must lie in [0,1)".into()));
        }
        if self.atoms_per_cell.0 < 1 || self.atoms_per_cell.0 > self.atoms_per_cell.1 {
            return Err(CoreError::InvalidArgument("bad atoms_per_cell range".into()));
        }
        let ok_range = |r: (f64, f64)| r.0 > 0.0 && r.0 <= r.1;
        if !ok_range(self.lattice_range)
            || !ok_range(self.amplitude_range)
            || !ok_range(self.width_range)
        {
            return Err(CoreError::InvalidArgument("empty sampling range".into()));
        }
        if self.lattice_range.0 <= 2.0 || self.lattice_range.1 >= 20.0 {
            return Err(CoreError::InvalidArgument(
                "lattice lengths must stay within (2, 20) angstrom".into(),
            ));
        }
        if self.amplitude_range.1 > std::f64::consts::PI {
            return Err(CoreError::InvalidArgument(
                "amplitudes above pi would violate the phase bound".into(),
            ));
        }
        Ok(())
    }
}

/// Draw a random lattice; deterministic given the RNG state.
pub fn sample_lattice(rng: &mut impl Rng, cfg: &SynthConfig) -> Result<LatticeSpec> {
    cfg.validate()?;
    let (lo, hi) = cfg.lattice_range;
    let lengths = [
        rng.gen_range(lo..hi),
        rng.gen_range(lo..hi),
        rng.gen_range(lo..hi),
    ];
    let in_plane_angle = rng.gen_range(60f64.to_radians()..120f64.to_radians());
    let n_atoms = rng.gen_range(cfg.atoms_per_cell.0..=cfg.atoms_per_cell.1);
    let basis = (0..n_atoms)
        .map(|_| BasisAtom {
            frac: [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()],
            amplitude: rng.gen_range(cfg.amplitude_range.0..cfg.amplitude_range.1),
            width: rng.gen_range(cfg.width_range.0..cfg.width_range.1),
        })
        .collect();
    let spec = LatticeSpec { lattice_lengths: lengths, in_plane_angle, basis };
    spec.validate()?;
    Ok(spec)
}

/// Render the lattice onto a voxel grid by summing every periodic Gaussian
/// image that reaches the grid, deleting sites with `vacancy_rate`.
pub fn render_volume<T: Real>(
    lattice: &LatticeSpec,
    grid: (usize, usize, usize),
    pitch: Pitch,
    vacancy_rate: f64,
    rng: &mut impl Rng,
) -> Result<PotentialVolume<T>> {
    lattice.validate()?;
    let (d, h, w) = grid;
    let extent = (d as f64 * pitch.dz, h as f64 * pitch.dy, w as f64 * pitch.dx);
    let [la, lb, lc] = lattice.lattice_lengths;
    let gamma = lattice.in_plane_angle;
    // cell vectors: a along x, b in-plane at gamma from a, c along depth
    let av = (0.0, 0.0, la);
    let bv = (0.0, lb * gamma.sin(), lb * gamma.cos());
    let cv = (lc, 0.0, 0.0);

    let mut vol = Vol::<f64>::zeros(d, h, w);
    let zc: Vec<f64> = (0..d).map(|i| (i as f64 + 0.5) * pitch.dz).collect();
    let yc: Vec<f64> = (0..h).map(|i| (i as f64 + 0.5) * pitch.dy).collect();
    let xc: Vec<f64> = (0..w).map(|i| (i as f64 + 0.5) * pitch.dx).collect();

    for atom in &lattice.basis {
        let cut = 6.0 * atom.width;
        let inv2w2 = 1.0 / (2.0 * atom.width * atom.width);
        // enumerate integer cell translates whose site can reach the box
        let nz = ((extent.0 + cut) / lc).ceil() as i64 + 1;
        let nyb = ((extent.1 + cut) / (lb * gamma.sin().abs().max(1e-6))).ceil() as i64 + 1;
        let nxa = ((extent.2 + cut + lb) / la).ceil() as i64 + 1;
        for ic in -1..=nz {
            for ib in -nyb..=nyb {
                for ia in -nxa..=nxa {
                    let site = (
                        atom.frac[0] * cv.0
                            + atom.frac[1] * bv.0
                            + atom.frac[2] * av.0
                            + ic as f64 * cv.0
                            + ib as f64 * bv.0
                            + ia as f64 * av.0,
                        atom.frac[0] * cv.1
                            + atom.frac[1] * bv.1
                            + atom.frac[2] * av.1
                            + ic as f64 * cv.1
                            + ib as f64 * bv.1
                            + ia as f64 * av.1,
                        atom.frac[0] * cv.2
                            + atom.frac[1] * bv.2
                            + atom.frac[2] * av.2
                            + ic as f64 * cv.2
                            + ib as f64 * bv.2
                            + ia as f64 * av.2,
                    );
                    // skip images that cannot touch the grid
                    if site.0 < -cut
                        || site.0 > extent.0 + cut
                        || site.1 < -cut
                        || site.1 > extent.1 + cut
                        || site.2 < -cut
                        || site.2 > extent.2 + cut
                    {
                        continue;
                    }
                    // every surviving site is one atom; vacancies delete it
                    if vacancy_rate > 0.0 && rng.gen::<f64>() < vacancy_rate {
                        continue;
                    }
                    let z0 = ((site.0 - cut) / pitch.dz).floor().max(0.0) as usize;
                    let z1 = (((site.0 + cut) / pitch.dz).ceil() as usize).min(d);
                    let y0 = ((site.1 - cut) / pitch.dy).floor().max(0.0) as usize;
                    let y1 = (((site.1 + cut) / pitch.dy).ceil() as usize).min(h);
                    let x0 = ((site.2 - cut) / pitch.dx).floor().max(0.0) as usize;
                    let x1 = (((site.2 + cut) / pitch.dx).ceil() as usize).min(w);
                    for zi in z0..z1 {
                        let dz2 = (zc[zi] - site.0) * (zc[zi] - site.0);
                        for yi in y0..y1 {
                            let dy2 = (yc[yi] - site.1) * (yc[yi] - site.1);
                            let row = (zi * h + yi) * w;
                            for xi in x0..x1 {
                                let dx2 = (xc[xi] - site.2) * (xc[xi] - site.2);
                                vol.data[row + xi] +=
                                    atom.amplitude * (-(dz2 + dy2 + dx2) * inv2w2).exp();
                            }
                        }
                    }
                }
            }
        }
    }
    let peak = vol.max();
    if peak > std::f64::consts::PI {
        return Err(CoreError::InvalidArgument(format!(
            "rendered peak {peak:.3} exceeds pi radians"
        )));
    }
    Ok(PotentialVolume::new(vol.map(|v| T::of(v)), pitch))
}

/// Rotate about the depth axis by `angle` (bilinear, per lateral slice),
/// then crop to `out` starting at the given voxel offsets.
pub fn rotate_crop<T: Real>(
    src: &PotentialVolume<T>,
    angle: f64,
    out: (usize, usize, usize),
    offset: (usize, usize, usize),
) -> Result<PotentialVolume<T>> {
    let (d, h, w) = src.dims();
    let (od, oh, ow) = out;
    if od + offset.0 > d || oh + offset.1 > h || ow + offset.2 > w {
        return Err(CoreError::InvalidArgument(format!(
            "crop {out:?} at {offset:?} exceeds source {d}x{h}x{w}"
        )));
    }
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    let mut dst = Vol::<T>::zeros(od, oh, ow);
    for dd in 0..od {
        let sl = src.vol.slice(dd + offset.0);
        for yy in 0..oh {
            let gy = (yy + offset.1) as f64;
            for xx in 0..ow {
                let gx = (xx + offset.2) as f64;
                // rotate the sample point back into the source frame
                let ry = gy - cy;
                let rx = gx - cx;
                let sy = cy + cos * ry - sin * rx;
                let sx = cx + sin * ry + cos * rx;
                let y0 = sy.floor();
                let x0 = sx.floor();
                let fy = sy - y0;
                let fx = sx - x0;
                let mut acc = 0.0;
                for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                    for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                        let yi = y0 as i64 + dy;
                        let xi = x0 as i64 + dx;
                        if yi >= 0 && yi < h as i64 && xi >= 0 && xi < w as i64 {
                            acc += wy * wx * sl[yi as usize * w + xi as usize].f64();
                        }
                    }
                }
                *dst.at_mut(dd, yy, xx) = T::of(acc);
            }
        }
    }
    Ok(PotentialVolume { vol: dst, pitch: src.pitch, rescale_factor: src.rescale_factor })
}

/// Training view: random in-plane rotation followed by a random crop.
pub fn augment<T: Real>(
    src: &PotentialVolume<T>,
    out: (usize, usize, usize),
    rng: &mut impl Rng,
) -> Result<PotentialVolume<T>> {
    let (d, h, w) = src.dims();
    let (od, oh, ow) = out;
    if od > d {
        return Err(CoreError::InvalidArgument(format!(
            "crop depth {od} exceeds source depth {d}"
        )));
    }
    // rotation leaves a centered valid square of side floor(min(h,w)/sqrt(2));
    // crops stay inside it so no zero-padding leaks in
    let valid = ((h.min(w) as f64) / std::f64::consts::SQRT_2).floor() as usize;
    if valid < oh || valid < ow {
        return Err(CoreError::InvalidArgument(format!(
            "source {h}x{w} too small for a rotated {oh}x{ow} crop"
        )));
    }
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let zoff = rng.gen_range(0..=d - od);
    let band_y = (h - valid) / 2..=(h - valid) / 2 + valid - oh;
    let band_x = (w - valid) / 2..=(w - valid) / 2 + valid - ow;
    let yoff = rng.gen_range(band_y);
    let xoff = rng.gen_range(band_x);
    rotate_crop(src, angle, out, (zoff, yoff, xoff))
}

/// Reference training crop size.
pub const TRAIN_CROP: (usize, usize, usize) = (8, 64, 64);

/// Multiply voxel values by the training scale factor `c`.
pub fn rescale_for_training<T: Real>(
    v: &PotentialVolume<T>,
    c: f64,
) -> Result<PotentialVolume<T>> {
    if v.rescale_factor != 1.0 {
        return Err(CoreError::InvalidArgument(format!(
            "volume already rescaled by {}",
            v.rescale_factor
        )));
    }
    let vol = v.vol.map(|x| x * T::of(c));
    Ok(PotentialVolume { vol, pitch: v.pitch, rescale_factor: c })
}

/// Undo `rescale_for_training`, restoring physical units exactly.
pub fn restore_physical<T: Real>(v: &PotentialVolume<T>) -> PotentialVolume<T> {
    if v.rescale_factor == 1.0 {
        return v.clone();
    }
    let inv = 1.0 / v.rescale_factor;
    PotentialVolume {
        vol: v.vol.map(|x| x * T::of(inv)),
        pitch: v.pitch,
        rescale_factor: 1.0,
    }
}

/// Reference training rescale factor.
pub const RESCALE_C: f64 = 25.0;
