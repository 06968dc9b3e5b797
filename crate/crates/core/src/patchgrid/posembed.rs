use crate::error::{bail, Result};

/// Fixed 3D sin-cos positional embedding, `∏grid × d`, rows in token order.
///
/// `d` is split into three equal groups for the x, y and z grid coordinates;
/// each group is a 1D embedding `[sin(p·ω_0..), cos(p·ω_0..)]` with
/// `ω_i = 10000^(-i/(d/6))`. Requires `d % 6 == 0`.
pub fn sincos_pos_embed_3d(grid_shape: [usize; 3], d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 6 != 0 {
        bail!(Config, "embedding width {d} must be a positive multiple of 6");
    }
    let group = d / 3;
    let half = group / 2;
    let omega: Vec<f64> = (0..half)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / half as f64))
        .collect();
    let n: usize = grid_shape.iter().product();
    let mut out = vec![0.0; n * d];
    let mut t = 0;
    for z in 0..grid_shape[2] {
        for y in 0..grid_shape[1] {
            for x in 0..grid_shape[0] {
                let row = &mut out[t * d..(t + 1) * d];
                for (a, pos) in [x, y, z].into_iter().enumerate() {
                    let g = &mut row[a * group..(a + 1) * group];
                    for (i, w) in omega.iter().enumerate() {
                        let arg = pos as f64 * w;
                        g[i] = arg.sin();
                        g[half + i] = arg.cos();
                    }
                }
                t += 1;
            }
        }
    }
    Ok(out)
}
