use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::tensor::ParamId;

/// Geometry of a (possibly grouped, possibly strided) 2-D convolution without bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    /// Stencil extents `(s, s')` along height and width.
    pub kernel: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub stride: usize,
    /// Zero padding along height and width.
    pub padding: (usize, usize),
}

impl ConvSpec {
    pub fn new(
        kernel: (usize, usize),
        in_channels: usize,
        out_channels: usize,
        groups: usize,
        stride: usize,
        padding: (usize, usize),
    ) -> Result<Self> {
        let spec = ConvSpec {
            kernel,
            in_channels,
            out_channels,
            groups,
            stride,
            padding,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Square `s x s` stencil with the size-preserving padding `s / 2`.
    pub fn square(s: usize, in_channels: usize, out_channels: usize, groups: usize, stride: usize) -> Result<Self> {
        Self::new((s, s), in_channels, out_channels, groups, stride, (s / 2, s / 2))
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if kh == 0 || kw == 0 || self.stride == 0 || self.groups == 0 {
            return Err(Error::config(format!(
                "convolution needs positive stencil, stride and groups, got kernel {kh}x{kw}, stride {}, groups {}",
                self.stride, self.groups
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("convolution channel counts must be positive"));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::config(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Number of weights `s * s' * (in / g) * out`.
    pub fn param_count(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.in_per_group() * self.out_channels
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_per_group(), self.kernel.0, self.kernel.1]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (ph, pw) = self.padding;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::config(format!(
                "input {h}x{w} with padding {ph}x{pw} is smaller than stencil {kh}x{kw}"
            )));
        }
        Ok(((h + 2 * ph - kh) / self.stride + 1, (w + 2 * pw - kw) / self.stride + 1))
    }

    fn check_input(&self, dims: [usize; 4]) -> Result<(usize, usize)> {
        if dims[3] != self.in_channels {
            return Err(Error::config(format!(
                "convolution expects {} input channels, feature map has {}",
                self.in_channels, dims[3]
            )));
        }
        self.output_hw(dims[1], dims[2])
    }

    fn check_weights<T: Scalar>(&self, weights: &Tensor<T>) -> Result<()> {
        if weights.shape() != self.weight_shape() {
            return Err(Error::config(format!(
                "weight tensor has shape {:?}, operator expects {:?}",
                weights.shape(),
                self.weight_shape()
            )));
        }
        Ok(())
    }

    // Small per-group blocks are faster as direct loops than as tiny GEMMs.
    fn use_direct(&self) -> bool {
        let (ci, og) = (self.in_per_group(), self.out_per_group());
        ci * og <= 16 || (ci, og) == (8, 8)
    }
}

/// A convolution together with its weights.
#[derive(Clone, Debug)]
pub struct ConvOperator<T> {
    pub spec: ConvSpec,
    pub weights: Tensor<T>,
    /// Registry key when the operator is stored in a [`ParamStore`](super::ParamStore).
    pub shared_id: Option<ParamId>,
}

impl<T: Scalar> ConvOperator<T> {
    pub fn new(spec: ConvSpec, weights: Tensor<T>) -> Result<Self> {
        spec.validate()?;
        spec.check_weights(&weights)?;
        Ok(ConvOperator {
            spec,
            weights,
            shared_id: None,
        })
    }

    pub fn zeros(spec: ConvSpec) -> Self {
        ConvOperator {
            spec,
            weights: Tensor::zeros(spec.weight_shape()),
            shared_id: None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    pub fn apply(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(input, &self.spec, &self.weights)
    }
}

const ROW_CHUNK: usize = 2048;

struct Geometry {
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    ho: usize,
    wo: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    stride: usize,
    groups: usize,
    cig: usize,
    og: usize,
}

impl Geometry {
    fn new(spec: &ConvSpec, dims: [usize; 4]) -> Result<Self> {
        let (ho, wo) = spec.check_input(dims)?;
        Ok(Geometry {
            b: dims[0],
            h: dims[1],
            w: dims[2],
            c: dims[3],
            ho,
            wo,
            o: spec.out_channels,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            ph: spec.padding.0,
            pw: spec.padding.1,
            stride: spec.stride,
            groups: spec.groups,
            cig: spec.in_per_group(),
            og: spec.out_per_group(),
        })
    }

    fn rows(&self) -> usize {
        self.b * self.ho * self.wo
    }

    fn k(&self) -> usize {
        self.kh * self.kw * self.cig
    }

    /// Input pixel offset (without channel) for output row `r` and tap `(ky, kx)`.
    #[inline]
    fn tap(&self, r: usize, ky: usize, kx: usize) -> Option<usize> {
        let ox = r % self.wo;
        let oy = (r / self.wo) % self.ho;
        let bi = r / (self.wo * self.ho);
        let iy = (oy * self.stride + ky).checked_sub(self.ph)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pw)?;
        if iy >= self.h || ix >= self.w {
            return None;
        }
        Some(((bi * self.h + iy) * self.w + ix) * self.c)
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.ph == 0 && self.pw == 0
    }
}

/// Weights of group `g` packed as a `K x og` matrix with `k = (ky * kw + kx) * cig + ci`.
fn pack_weights<T: Scalar>(geo: &Geometry, w: &[T], g: usize, out: &mut Vec<T>) {
    let k = geo.k();
    out.clear();
    out.resize(k * geo.og, T::zero());
    let khw = geo.kh * geo.kw;
    for o in 0..geo.og {
        let base = (g * geo.og + o) * k;
        for ci in 0..geo.cig {
            for t in 0..khw {
                out[(t * geo.cig + ci) * geo.og + o] = w[base + ci * khw + t];
            }
        }
    }
}

fn unpack_add_weights<T: Scalar>(geo: &Geometry, packed: &[T], g: usize, w: &mut [T]) {
    let k = geo.k();
    let khw = geo.kh * geo.kw;
    for o in 0..geo.og {
        let base = (g * geo.og + o) * k;
        for ci in 0..geo.cig {
            for t in 0..khw {
                w[base + ci * khw + t] = w[base + ci * khw + t] + packed[(t * geo.cig + ci) * geo.og + o];
            }
        }
    }
}

fn im2col<T: Scalar>(geo: &Geometry, x: &[T], g: usize, r0: usize, r1: usize, cols: &mut Vec<T>) {
    let k = geo.k();
    cols.clear();
    cols.resize((r1 - r0) * k, T::zero());
    for r in r0..r1 {
        let row = &mut cols[(r - r0) * k..(r - r0 + 1) * k];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                if let Some(p) = geo.tap(r, ky, kx) {
                    let t = ky * geo.kw + kx;
                    let src = &x[p + g * geo.cig..p + (g + 1) * geo.cig];
                    row[t * geo.cig..(t + 1) * geo.cig].copy_from_slice(src);
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(geo: &Geometry, cols: &[T], g: usize, r0: usize, r1: usize, dx: &mut [T]) {
    let k = geo.k();
    for r in r0..r1 {
        let row = &cols[(r - r0) * k..(r - r0 + 1) * k];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                if let Some(p) = geo.tap(r, ky, kx) {
                    let t = ky * geo.kw + kx;
                    let dst = &mut dx[p + g * geo.cig..p + (g + 1) * geo.cig];
                    for (d, &s) in dst.iter_mut().zip(&row[t * geo.cig..(t + 1) * geo.cig]) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// Forward convolution. Output shape `(b, (m + 2p - s) / stride + 1, (n + 2p' - s') / stride + 1, out)`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec, weights: &Tensor<T>) -> Result<Tensor<T>> {
    spec.validate()?;
    spec.check_weights(weights)?;
    let geo = Geometry::new(spec, input.dims4()?)?;
    let mut out = Tensor::zeros([geo.b, geo.ho, geo.wo, geo.o]);
    let x = input.data();
    let w = weights.data();
    let y = out.data_mut();
    if spec.use_direct() {
        direct_forward(&geo, x, w, y);
        return Ok(out);
    }
    let k = geo.k();
    let rows = geo.rows();
    let mut packed = Vec::new();
    let mut cols = Vec::new();
    for g in 0..geo.groups {
        pack_weights(&geo, w, g, &mut packed);
        if geo.pointwise() {
            // SAFETY: x is rows x c, packed is cig x og, y is rows x o.
            unsafe {
                T::gemm(
                    rows,
                    geo.cig,
                    geo.og,
                    T::one(),
                    x.as_ptr().add(g * geo.cig),
                    geo.c as isize,
                    1,
                    packed.as_ptr(),
                    geo.og as isize,
                    1,
                    T::zero(),
                    y.as_mut_ptr().add(g * geo.og),
                    geo.o as isize,
                    1,
                );
            }
            continue;
        }
        for r0 in (0..rows).step_by(ROW_CHUNK) {
            let r1 = (r0 + ROW_CHUNK).min(rows);
            im2col(&geo, x, g, r0, r1, &mut cols);
            // SAFETY: cols is (r1 - r0) x k, packed is k x og, y rows r0..r1 are in bounds.
            unsafe {
                T::gemm(
                    r1 - r0,
                    k,
                    geo.og,
                    T::one(),
                    cols.as_ptr(),
                    k as isize,
                    1,
                    packed.as_ptr(),
                    geo.og as isize,
                    1,
                    T::zero(),
                    y.as_mut_ptr().add(r0 * geo.o + g * geo.og),
                    geo.o as isize,
                    1,
                );
            }
        }
    }
    Ok(out)
}

/// Weights as `[tap][group][in_per_group][out_per_group]`, so a tap of one group is a
/// contiguous `cig x og` block.
fn pack_direct<T: Scalar>(geo: &Geometry, w: &[T]) -> Vec<T> {
    let khw = geo.kh * geo.kw;
    let mut out = vec![T::zero(); w.len()];
    for oc in 0..geo.o {
        let (g, j) = (oc / geo.og, oc % geo.og);
        for ci in 0..geo.cig {
            for t in 0..khw {
                out[packed_index(geo, t, g, ci, j)] = w[(oc * geo.cig + ci) * khw + t];
            }
        }
    }
    out
}

#[inline(always)]
fn packed_index(geo: &Geometry, t: usize, g: usize, ci: usize, j: usize) -> usize {
    ((t * geo.groups + g) * geo.cig + ci) * geo.og + j
}

/// Calls `f(row, tap, pixel_offset)` for every output row and every in-bounds stencil tap.
#[inline(always)]
fn for_each_tap(geo: &Geometry, mut f: impl FnMut(usize, usize, usize)) {
    let mut r = 0;
    for bi in 0..geo.b {
        for oy in 0..geo.ho {
            for ox in 0..geo.wo {
                for ky in 0..geo.kh {
                    let iy = oy * geo.stride + ky;
                    if iy < geo.ph || iy - geo.ph >= geo.h {
                        continue;
                    }
                    let row_base = (bi * geo.h + iy - geo.ph) * geo.w;
                    for kx in 0..geo.kw {
                        let ix = ox * geo.stride + kx;
                        if ix < geo.pw || ix - geo.pw >= geo.w {
                            continue;
                        }
                        f(r, ky * geo.kw + kx, (row_base + ix - geo.pw) * geo.c);
                    }
                }
                r += 1;
            }
        }
    }
}

macro_rules! dispatch_fixed {
    ($geo:expr, $fixed:ident, $any:ident, $args:tt, [$(($ci:literal, $og:literal)),*]) => {
        match ($geo.cig, $geo.og) {
            $(($ci, $og) => $fixed::<T, $ci, $og> $args,)*
            _ => $any $args,
        }
    };
}

fn direct_forward<T: Scalar>(geo: &Geometry, x: &[T], w: &[T], y: &mut [T]) {
    let wp = pack_direct(geo, w);
    dispatch_fixed!(
        geo,
        forward_fixed,
        forward_any,
        (geo, x, &wp, y),
        [(1, 1), (1, 2), (2, 1), (2, 2), (1, 4), (4, 1), (4, 4), (8, 8)]
    )
}

fn forward_fixed<T: Scalar, const CI: usize, const OG: usize>(geo: &Geometry, x: &[T], wp: &[T], y: &mut [T]) {
    let o = geo.o;
    for_each_tap(geo, |r, t, p| {
        let yrow = &mut y[r * o..(r + 1) * o];
        for g in 0..geo.groups {
            let xs: &[T; CI] = x[p + g * CI..p + (g + 1) * CI].try_into().unwrap();
            let wb = (t * geo.groups + g) * CI * OG;
            let mut acc = [T::zero(); OG];
            for i in 0..CI {
                let ws: &[T; OG] = wp[wb + i * OG..wb + (i + 1) * OG].try_into().unwrap();
                for j in 0..OG {
                    acc[j] = acc[j] + xs[i] * ws[j];
                }
            }
            let ys = &mut yrow[g * OG..(g + 1) * OG];
            for j in 0..OG {
                ys[j] = ys[j] + acc[j];
            }
        }
    });
}

fn forward_any<T: Scalar>(geo: &Geometry, x: &[T], wp: &[T], y: &mut [T]) {
    let (o, cig, og) = (geo.o, geo.cig, geo.og);
    for_each_tap(geo, |r, t, p| {
        let yrow = &mut y[r * o..(r + 1) * o];
        for g in 0..geo.groups {
            let xs = &x[p + g * cig..p + (g + 1) * cig];
            let ys = &mut yrow[g * og..(g + 1) * og];
            let wb = (t * geo.groups + g) * cig * og;
            for (i, &xv) in xs.iter().enumerate() {
                for (yv, &wv) in ys.iter_mut().zip(&wp[wb + i * og..wb + (i + 1) * og]) {
                    *yv = *yv + xv * wv;
                }
            }
        }
    });
}

fn direct_backward<T: Scalar>(geo: &Geometry, x: &[T], w: &[T], dy: &[T], dx: Option<&mut [T]>, dw: &mut [T]) {
    let wp = pack_direct(geo, w);
    let mut dwp = vec![T::zero(); w.len()];
    dispatch_fixed!(
        geo,
        backward_fixed,
        backward_any,
        (geo, x, &wp, dy, dx, &mut dwp),
        [(1, 1), (1, 2), (2, 1), (2, 2), (1, 4), (4, 1), (4, 4), (8, 8)]
    );
    let khw = geo.kh * geo.kw;
    for oc in 0..geo.o {
        let (g, j) = (oc / geo.og, oc % geo.og);
        for ci in 0..geo.cig {
            for t in 0..khw {
                let i = (oc * geo.cig + ci) * khw + t;
                dw[i] = dw[i] + dwp[packed_index(geo, t, g, ci, j)];
            }
        }
    }
}

fn backward_fixed<T: Scalar, const CI: usize, const OG: usize>(
    geo: &Geometry,
    x: &[T],
    wp: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dwp: &mut [T],
) {
    let o = geo.o;
    let mut dx = dx;
    for_each_tap(geo, |r, t, p| {
        let dyrow = &dy[r * o..(r + 1) * o];
        for g in 0..geo.groups {
            let xs: [T; CI] = x[p + g * CI..p + (g + 1) * CI].try_into().unwrap();
            let ds: [T; OG] = dyrow[g * OG..(g + 1) * OG].try_into().unwrap();
            let wb = (t * geo.groups + g) * CI * OG;
            for i in 0..CI {
                let dws: &mut [T; OG] = (&mut dwp[wb + i * OG..wb + (i + 1) * OG]).try_into().unwrap();
                for j in 0..OG {
                    dws[j] = dws[j] + xs[i] * ds[j];
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxs = &mut dx[p + g * CI..p + (g + 1) * CI];
                for i in 0..CI {
                    let ws: &[T; OG] = wp[wb + i * OG..wb + (i + 1) * OG].try_into().unwrap();
                    let mut acc = T::zero();
                    for j in 0..OG {
                        acc = acc + ws[j] * ds[j];
                    }
                    dxs[i] = dxs[i] + acc;
                }
            }
        }
    });
}

fn backward_any<T: Scalar>(geo: &Geometry, x: &[T], wp: &[T], dy: &[T], dx: Option<&mut [T]>, dwp: &mut [T]) {
    let (o, cig, og) = (geo.o, geo.cig, geo.og);
    let mut dx = dx;
    for_each_tap(geo, |r, t, p| {
        let dyrow = &dy[r * o..(r + 1) * o];
        for g in 0..geo.groups {
            let xs = &x[p + g * cig..p + (g + 1) * cig];
            let ds = &dyrow[g * og..(g + 1) * og];
            let wb = (t * geo.groups + g) * cig * og;
            for (i, &xv) in xs.iter().enumerate() {
                let blk = wb + i * og..wb + (i + 1) * og;
                for (dwv, &d) in dwp[blk.clone()].iter_mut().zip(ds) {
                    *dwv = *dwv + xv * d;
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let acc = wp[blk].iter().zip(ds).fold(T::zero(), |a, (&wv, &d)| a + wv * d);
                    dx[p + g * cig + i] = dx[p + g * cig + i] + acc;
                }
            }
        }
    });
}

/// Gradients of a convolution with respect to its input (optional) and weights.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    spec.check_weights(weights)?;
    let geo = Geometry::new(spec, input.dims4()?)?;
    if grad_out.shape() != [geo.b, geo.ho, geo.wo, geo.o] {
        return Err(Error::config(format!(
            "output gradient shape {:?} does not match convolution output {:?}",
            grad_out.shape(),
            [geo.b, geo.ho, geo.wo, geo.o]
        )));
    }
    let x = input.data();
    let w = weights.data();
    let dy = grad_out.data();
    let mut dw = Tensor::zeros(spec.weight_shape());
    let mut dx = need_input.then(|| Tensor::zeros(input.shape().to_vec()));

    if spec.use_direct() {
        direct_backward(&geo, x, w, dy, dx.as_mut().map(|t| t.data_mut()), dw.data_mut());
        return Ok((dx, dw));
    }

    let k = geo.k();
    let rows = geo.rows();
    let mut packed = Vec::new();
    let mut dpacked = vec![T::zero(); k * geo.og];
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    for g in 0..geo.groups {
        pack_weights(&geo, w, g, &mut packed);
        dpacked.iter_mut().for_each(|v| *v = T::zero());
        if geo.pointwise() {
            // SAFETY: dpacked = x_g^T dy_g (cig x og); dx_g = dy_g packed^T (rows x cig).
            unsafe {
                T::gemm(
                    geo.cig,
                    rows,
                    geo.og,
                    T::one(),
                    x.as_ptr().add(g * geo.cig),
                    1,
                    geo.c as isize,
                    dy.as_ptr().add(g * geo.og),
                    geo.o as isize,
                    1,
                    T::zero(),
                    dpacked.as_mut_ptr(),
                    geo.og as isize,
                    1,
                );
                if let Some(dx) = dx.as_mut() {
                    T::gemm(
                        rows,
                        geo.og,
                        geo.cig,
                        T::one(),
                        dy.as_ptr().add(g * geo.og),
                        geo.o as isize,
                        1,
                        packed.as_ptr(),
                        1,
                        geo.og as isize,
                        T::zero(),
                        dx.data_mut().as_mut_ptr().add(g * geo.cig),
                        geo.c as isize,
                        1,
                    );
                }
            }
            unpack_add_weights(&geo, &dpacked, g, dw.data_mut());
            continue;
        }
        for r0 in (0..rows).step_by(ROW_CHUNK) {
            let r1 = (r0 + ROW_CHUNK).min(rows);
            let m = r1 - r0;
            im2col(&geo, x, g, r0, r1, &mut cols);
            // SAFETY: cols is m x k; dy rows r0..r1 of group g form an m x og block.
            unsafe {
                T::gemm(
                    k,
                    m,
                    geo.og,
                    T::one(),
                    cols.as_ptr(),
                    1,
                    k as isize,
                    dy.as_ptr().add(r0 * geo.o + g * geo.og),
                    geo.o as isize,
                    1,
                    T::one(),
                    dpacked.as_mut_ptr(),
                    geo.og as isize,
                    1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                dcols.clear();
                dcols.resize(m * k, T::zero());
                // SAFETY: dcols (m x k) = dy block (m x og) * packed^T (og x k).
                unsafe {
                    T::gemm(
                        m,
                        geo.og,
                        k,
                        T::one(),
                        dy.as_ptr().add(r0 * geo.o + g * geo.og),
                        geo.o as isize,
                        1,
                        packed.as_ptr(),
                        1,
                        geo.og as isize,
                        T::zero(),
                        dcols.as_mut_ptr(),
                        k as isize,
                        1,
                    );
                }
                col2im_add(&geo, &dcols, g, r0, r1, dx.data_mut());
            }
        }
        unpack_add_weights(&geo, &dpacked, g, dw.data_mut());
    }
    Ok((dx, dw))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 4], scale: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i * 37 % 101) as f64 / 50.0 - 1.0) * scale)
    }

    #[test]
    fn identity_pointwise_kernel_is_identity() {
        let c = 5;
        let spec = ConvSpec::new((1, 1), c, c, 1, 1, (0, 0)).unwrap();
        let w = Tensor::from_fn(spec.weight_shape(), |i| if i / c == i % c { 1.0 } else { 0.0 });
        let x = ramp([2, 3, 4, c], 1.0);
        let y = conv2d(&x, &spec, &w).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn output_extents_follow_stride_and_padding() {
        let spec = ConvSpec::square(3, 2, 4, 2, 2).unwrap();
        let x = ramp([1, 7, 6, 2], 1.0);
        let y = conv2d(&x, &spec, &Tensor::zeros(spec.weight_shape())).unwrap();
        assert_eq!(y.shape(), &[1, 4, 3, 4]);
    }

    #[test]
    fn grouped_equals_split_and_concatenate() {
        let spec = ConvSpec::square(3, 4, 4, 2, 1).unwrap();
        let w = ramp([4, 2, 3, 3], 0.3).reshape(spec.weight_shape().to_vec()).unwrap();
        let x = ramp([2, 5, 5, 4], 1.0);
        let y = conv2d(&x, &spec, &w).unwrap();

        let half = ConvSpec::square(3, 2, 2, 1, 1).unwrap();
        for g in 0..2 {
            let xg = Tensor::from_fn([2, 5, 5, 2], |i| x.data()[(i / 2) * 4 + g * 2 + i % 2]);
            let wg = Tensor::new(half.weight_shape(), w.data()[g * 36..(g + 1) * 36].to_vec()).unwrap();
            let yg = conv2d(&xg, &half, &wg).unwrap();
            for (i, v) in yg.data().iter().enumerate() {
                let full = y.data()[(i / 2) * 4 + g * 2 + i % 2];
                assert!((v - full).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn direct_and_gemm_paths_agree() {
        // 4 in-per-group x 8 out-per-group takes the GEMM path, 2 x 2 the direct path.
        let wide = ConvSpec::square(3, 8, 16, 2, 1).unwrap();
        let narrow = ConvSpec::square(3, 8, 8, 4, 1).unwrap();
        let x = ramp([2, 6, 5, 8], 1.0);
        for spec in [wide, narrow] {
            let w = Tensor::from_fn(spec.weight_shape(), |i| ((i * 13 % 17) as f64 - 8.0) / 10.0);
            let y = conv2d(&x, &spec, &w).unwrap();
            let mut naive = Tensor::zeros(y.shape().to_vec());
            let geo = Geometry::new(&spec, x.dims4().unwrap()).unwrap();
            direct_forward(&geo, x.data(), w.data(), naive.data_mut());
            assert!(y.max_abs_diff(&naive) < 1e-12);
        }
    }

    #[test]
    fn weight_gradient_of_sum_for_pointwise_is_channel_sum() {
        let spec = ConvSpec::new((1, 1), 3, 2, 1, 1, (0, 0)).unwrap();
        let x = ramp([2, 3, 3, 3], 1.0);
        let w = Tensor::full(spec.weight_shape(), 0.5);
        let dy = Tensor::full([2, 3, 3, 2], 1.0);
        let (_, dw) = conv2d_backward(&x, &spec, &w, &dy, false).unwrap();
        for o in 0..2 {
            for ci in 0..3 {
                let expect: f64 = x.data().iter().skip(ci).step_by(3).sum();
                assert!((dw.data()[o * 3 + ci] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn groups_must_divide_channels() {
        assert!(matches!(ConvSpec::square(3, 6, 4, 4, 1), Err(Error::Config(_))));
        let spec = ConvSpec::square(3, 4, 4, 1, 1).unwrap();
        let x = ramp([1, 4, 4, 3], 1.0);
        let err = conv2d(&x, &spec, &Tensor::zeros(spec.weight_shape())).unwrap_err();
        assert!(err.to_string().contains("4 input channels"), "{err}");
    }

    /// Seven nested loops straight from the definition.
    fn reference(x: &Tensor<f64>, spec: &ConvSpec, w: &Tensor<f64>) -> Tensor<f64> {
        let [b, m, n, c] = x.dims4().unwrap();
        let (ho, wo) = spec.output_hw(m, n).unwrap();
        let (kh, kw) = spec.kernel;
        let (cig, og) = (spec.in_per_group(), spec.out_per_group());
        let mut y = Tensor::zeros([b, ho, wo, spec.out_channels]);
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for oc in 0..spec.out_channels {
                        let g = oc / og;
                        let mut acc = 0.0;
                        for ci in 0..cig {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * spec.stride + ky) as isize - spec.padding.0 as isize;
                                    let ix = (ox * spec.stride + kx) as isize - spec.padding.1 as isize;
                                    if iy < 0 || ix < 0 || iy >= m as isize || ix >= n as isize {
                                        continue;
                                    }
                                    let xi = ((bi * m + iy as usize) * n + ix as usize) * c + g * cig + ci;
                                    acc += x.data()[xi] * w.data()[((oc * cig + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        y.data_mut()[((bi * ho + oy) * wo + ox) * spec.out_channels + oc] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn every_kernel_path_matches_reference() {
        // (cin, cout, groups, stride, kernel, pad): fixed-size, generic direct, GEMM and pointwise paths.
        let cases = [
            (4, 4, 4, 1, 3, 1),
            (4, 8, 4, 2, 3, 1),
            (8, 4, 4, 1, 1, 0),
            (4, 8, 4, 1, 1, 0),
            (8, 8, 4, 1, 3, 1),
            (8, 8, 2, 1, 3, 1),
            (16, 16, 2, 1, 3, 1),
            (16, 16, 4, 2, 3, 1),
            (3, 5, 1, 1, 3, 1),
            (3, 7, 1, 2, 3, 0),
            (6, 6, 1, 1, 1, 0),
            (12, 12, 2, 1, 1, 0),
            (8, 32, 1, 1, 3, 1),
        ];
        for (cin, cout, groups, stride, k, pad) in cases {
            let spec = ConvSpec::new((k, k), cin, cout, groups, stride, (pad, pad)).unwrap();
            let x = ramp([2, 5, 6, cin], 1.0);
            let w = Tensor::from_fn(spec.weight_shape(), |i| ((i * 13 % 17) as f64 - 8.0) / 10.0);
            let y = conv2d(&x, &spec, &w).unwrap();
            let expect = reference(&x, &spec, &w);
            assert!(y.max_abs_diff(&expect) < 1e-12, "forward {spec:?}");

            // Backward against the adjoint identities <dy, conv(dx_probe)> and <dy, conv_w(probe)>.
            let dy = ramp(y.shape().try_into().unwrap(), 0.7);
            let (dx, dw) = conv2d_backward(&x, &spec, &w, &dy, true).unwrap();
            let dx = dx.unwrap();
            let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
            for probe in 0..3 {
                let v = Tensor::from_fn(x.shape().to_vec(), |i| ((i * 7 + probe * 3) % 11) as f64 - 5.0);
                let lhs = dot(&dy, &reference(&v, &spec, &w));
                assert!((lhs - dot(&dx, &v)).abs() < 1e-9 * lhs.abs().max(1.0), "input grad {spec:?}");
                let dwp = Tensor::from_fn(w.shape().to_vec(), |i| ((i * 5 + probe) % 9) as f64 - 4.0);
                let lhs = dot(&dy, &reference(&x, &spec, &dwp));
                assert!((lhs - dot(&dw, &dwp)).abs() < 1e-9 * lhs.abs().max(1.0), "weight grad {spec:?}");
            }
        }
    }
}

