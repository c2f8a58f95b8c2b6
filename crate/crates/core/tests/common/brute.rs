//! Brute-force evaluator that builds the full joint `p(x, y, ẑ, x̂)` and
//! reads every term of the exact objective off it.

use rdpb::oracle::DiscreteSystem;

struct Joint {
    nx: usize,
    ny: usize,
    nz: usize,
    p: Vec<f64>,
}

impl Joint {
    fn of(sys: &DiscreteSystem) -> Self {
        let (nx, ny, nz) = (sys.p_xy.len(), sys.p_xy[0].len(), sys.enc[0].len());
        let mut p = vec![0.0; nx * ny * nz * nx];
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    for xh in 0..nx {
                        p[((x * ny + y) * nz + z) * nx + xh] = sys.p_xy[x][y] * sys.enc[x][z] * sys.dec_x[z][xh];
                    }
                }
            }
        }
        Self { nx, ny, nz, p }
    }

    fn at(&self, x: usize, y: usize, z: usize, xh: usize) -> f64 {
        self.p[((x * self.ny + y) * self.nz + z) * self.nx + xh]
    }

    fn marginal(&self, keep: impl Fn(usize, usize, usize, usize) -> usize, size: usize) -> Vec<f64> {
        let mut out = vec![0.0; size];
        for x in 0..self.nx {
            for y in 0..self.ny {
                for z in 0..self.nz {
                    for xh in 0..self.nx {
                        out[keep(x, y, z, xh)] += self.at(x, y, z, xh);
                    }
                }
            }
        }
        out
    }
}

pub struct Terms {
    pub p_z: Vec<f64>,
    pub p_xhat: Vec<f64>,
    pub cond_entropy: f64,
    pub rate: f64,
    pub distortion: f64,
    pub perception: f64,
    pub h_y: f64,
}

pub fn brute_force(sys: &DiscreteSystem) -> Terms {
    let j = Joint::of(sys);
    let (nx, ny, nz) = (j.nx, j.ny, j.nz);
    let p_x = j.marginal(|x, _, _, _| x, nx);
    let p_y = j.marginal(|_, y, _, _| y, ny);
    let p_z = j.marginal(|_, _, z, _| z, nz);
    let p_xhat = j.marginal(|_, _, _, xh| xh, nx);
    let p_yz = j.marginal(|_, y, z, _| y * nz + z, ny * nz);
    let p_xz = j.marginal(|x, _, z, _| x * nz + z, nx * nz);

    let mut cond_entropy = 0.0;
    for y in 0..ny {
        for z in 0..nz {
            let p = p_yz[y * nz + z];
            if p > 0.0 {
                cond_entropy -= p * (p / p_z[z]).ln();
            }
        }
    }
    let mut rate = 0.0;
    for x in 0..nx {
        for z in 0..nz {
            let p = p_xz[x * nz + z];
            if p > 0.0 {
                rate += p * (p / (p_x[x] * p_z[z])).ln();
            }
        }
    }
    let mut distortion = 0.0;
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                for xh in 0..nx {
                    let d: f64 = sys.pixel_embed[x]
                        .iter()
                        .zip(&sys.pixel_embed[xh])
                        .map(|(a, b)| (a - b).powi(2))
                        .sum();
                    distortion += j.at(x, y, z, xh) * d;
                }
            }
        }
    }
    let perception = (0..nx)
        .filter(|&x| p_x[x] > 0.0)
        .map(|x| p_x[x] * (p_x[x] / p_xhat[x]).ln())
        .sum();
    let h_y = -p_y.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    Terms {
        p_z,
        p_xhat,
        cond_entropy,
        rate,
        distortion,
        perception,
        h_y,
    }
}
