use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::tensor::{expect_rank, Tensor};

/// Zero padding `(top, bottom, left, right)` applied to the search volume.
///
/// With padding, output `(y, x)` places template cell `(h/2, w/2)` on search
/// pixel `(y, x)`, so the output has the search extents.
pub fn xcorr_padding(h: usize, w: usize, pad: bool) -> (usize, usize, usize, usize) {
    if pad {
        (h / 2, h - 1 - h / 2, w / 2, w - 1 - w / 2)
    } else {
        (0, 0, 0, 0)
    }
}

fn dims<T: Scalar>(template: &Tensor<T>, search: &Tensor<T>, pad: bool) -> Result<[usize; 9]> {
    let ts = expect_rank(template, 3, "depthwise_xcorr", "template")?;
    let ss = expect_rank(search, 3, "depthwise_xcorr", "search")?;
    ensure!(
        ts[0] == ss[0],
        "depthwise_xcorr",
        "channel count mismatch: template {} vs search {}",
        ts[0],
        ss[0]
    );
    let (c, h, w, sh, sw) = (ts[0], ts[1], ts[2], ss[1], ss[2]);
    let (pt, pb, pl, pr) = xcorr_padding(h, w, pad);
    ensure!(
        h >= 1 && w >= 1 && h <= sh + pt + pb && w <= sw + pl + pr,
        "depthwise_xcorr",
        "template {}x{} does not fit search {}x{} (pad={})",
        h,
        w,
        sh,
        sw,
        pad
    );
    let oh = sh + pt + pb - h + 1;
    let ow = sw + pl + pr - w + 1;
    Ok([c, h, w, sh, sw, pt, pl, oh, ow])
}

/// Per-channel sliding-window correlation of `template [C,h,w]` over `search [C,H,W]`.
pub fn depthwise_xcorr<T: Scalar>(template: &Tensor<T>, search: &Tensor<T>, pad: bool) -> Result<Tensor<T>> {
    let [c, h, w, sh, sw, pt, pl, oh, ow] = dims(template, search, pad)?;
    let (t, s) = (template.data(), search.data());
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let tc = &t[ch * h * w..(ch + 1) * h * w];
        let sc = &s[ch * sh * sw..(ch + 1) * sh * sw];
        let oc = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for u in 0..h {
            for v in 0..w {
                let tv = tc[u * w + v];
                if tv == T::zero() {
                    continue;
                }
                for y in 0..oh {
                    let sy = y + u;
                    if sy < pt || sy - pt >= sh {
                        continue;
                    }
                    let srow = &sc[(sy - pt) * sw..(sy - pt + 1) * sw];
                    let orow = &mut oc[y * ow..(y + 1) * ow];
                    // x range with 0 <= x + v - pl < sw
                    let x0 = pl.saturating_sub(v);
                    let x1 = (sw + pl).saturating_sub(v).min(ow);
                    for x in x0..x1 {
                        orow[x] += tv * srow[x + v - pl];
                    }
                }
            }
        }
    }
    Tensor::new([c, oh, ow], out)
}

/// Returns `(grad_template, grad_search)`.
pub fn depthwise_xcorr_backward<T: Scalar>(
    template: &Tensor<T>,
    search: &Tensor<T>,
    pad: bool,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let [c, h, w, sh, sw, pt, pl, oh, ow] = dims(template, search, pad).expect("xcorr grad dims");
    let (t, s, g) = (template.data(), search.data(), grad.data());
    let mut gt = vec![T::zero(); t.len()];
    let mut gs = vec![T::zero(); s.len()];
    for ch in 0..c {
        let tc = &t[ch * h * w..(ch + 1) * h * w];
        let sc = &s[ch * sh * sw..(ch + 1) * sh * sw];
        let gc = &g[ch * oh * ow..(ch + 1) * oh * ow];
        let gtc = &mut gt[ch * h * w..(ch + 1) * h * w];
        let gsc = &mut gs[ch * sh * sw..(ch + 1) * sh * sw];
        for u in 0..h {
            for v in 0..w {
                let tv = tc[u * w + v];
                let mut acc = T::zero();
                for y in 0..oh {
                    let sy = y + u;
                    if sy < pt || sy - pt >= sh {
                        continue;
                    }
                    let row = (sy - pt) * sw;
                    let x0 = pl.saturating_sub(v);
                    let x1 = (sw + pl).saturating_sub(v).min(ow);
                    for x in x0..x1 {
                        let gv = gc[y * ow + x];
                        let si = row + x + v - pl;
                        acc += gv * sc[si];
                        gsc[si] += gv * tv;
                    }
                }
                gtc[u * w + v] = acc;
            }
        }
    }
    (
        Tensor::new(template.shape().to_vec(), gt).expect("xcorr grad template"),
        Tensor::new(search.shape().to_vec(), gs).expect("xcorr grad search"),
    )
}
