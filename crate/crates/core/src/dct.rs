//! Orthonormal 2D block DCT and spectral maps.
//!
//! A frame sequence `T×C×H×W` is padded reflectively at the bottom and
//! right until both extents are multiples of the block size (or of a larger
//! alignment), cut into `B×B` patches and transformed patch by patch. The
//! result is laid out as `T×F×C×(H'/B)×(W'/B)` with `F = B²` and frequency
//! index `f = u·B + v` in row-major order over `(u, v)`; `u` pairs with the
//! row coordinate.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::tape::Var;
use crate::tensor::{read_ftt, write_ftt, Dtype, SparseMap, Tensor};

/// DCT basis for one block size: `basis[u][x] = c(u)·cos((2x+1)uπ / 2B)`,
/// with `c(0) = √(1/B)` and `c(u) = √(2/B)` otherwise.
#[derive(Clone, Debug)]
pub struct BlockDct {
    size: usize,
    basis: Tensor,
}

impl BlockDct {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("DCT block size must be positive"));
        }
        let b = size as f64;
        let basis = Tensor::from_fn(&[size, size], |i| {
            let (u, x) = ((i / size) as f64, (i % size) as f64);
            let c = if u == 0.0 { (1.0 / b).sqrt() } else { (2.0 / b).sqrt() };
            c * ((2.0 * x + 1.0) * u * PI / (2.0 * b)).cos()
        });
        Ok(BlockDct { size, basis })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn basis(&self) -> &Tensor {
        &self.basis
    }

    fn check(&self, t: &[usize], op: &'static str) -> Result<()> {
        if t != [self.size, self.size] {
            return Err(Error::shape(
                op,
                format!("expected {}×{} block, got {:?}", self.size, self.size, t),
            ));
        }
        Ok(())
    }

    /// `D = M·P·Mᵀ`.
    pub fn dct2(&self, patch: &Tensor) -> Result<Tensor> {
        self.check(patch.shape(), "dct2")?;
        self.basis.matmul(patch)?.matmul(&self.basis.transpose_last()?)
    }

    /// `P = Mᵀ·D·M`.
    pub fn idct2(&self, block: &Tensor) -> Result<Tensor> {
        self.check(block.shape(), "idct2")?;
        self.basis.transpose_last()?.matmul(block)?.matmul(&self.basis)
    }

    pub fn dct2_var<'t>(&self, patch: Var<'t>) -> Result<Var<'t>> {
        self.check(&patch.shape(), "dct2")?;
        let tape = patch.tape();
        let m = tape.constant(self.basis.clone())?;
        let mt = tape.constant(self.basis.transpose_last()?)?;
        m.matmul(patch)?.matmul(mt)
    }

    pub fn idct2_var<'t>(&self, block: Var<'t>) -> Result<Var<'t>> {
        self.check(&block.shape(), "idct2")?;
        let tape = block.tape();
        let m = tape.constant(self.basis.clone())?;
        let mt = tape.constant(self.basis.transpose_last()?)?;
        mt.matmul(block)?.matmul(m)
    }

    #[inline]
    fn coef(&self, u: usize, x: usize) -> f64 {
        self.basis.data()[u * self.size + x]
    }
}

/// Mirror index without repeating the edge sample (`numpy` "reflect").
pub(crate) fn reflect(i: usize, n: usize) -> usize {
    if n <= 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Geometry shared by a frame sequence and its spectral map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpectralGeometry {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub block: usize,
    pub padded_height: usize,
    pub padded_width: usize,
}

impl SpectralGeometry {
    /// Pads `height`/`width` up to multiples of `block · align_cells`.
    pub fn new(frames: usize, channels: usize, height: usize, width: usize, block: usize, align_cells: usize) -> Result<Self> {
        if frames == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("spectral transform of an empty frame sequence"));
        }
        if block == 0 || align_cells == 0 {
            return Err(Error::invalid("block size and alignment must be positive"));
        }
        let unit = block * align_cells;
        Ok(SpectralGeometry {
            frames,
            channels,
            height,
            width,
            block,
            padded_height: height.div_ceil(unit) * unit,
            padded_width: width.div_ceil(unit) * unit,
        })
    }

    pub fn for_frames(frames: &Tensor, block: usize, align_cells: usize) -> Result<Self> {
        match *frames.shape() {
            [t, c, h, w] => Self::new(t, c, h, w, block, align_cells),
            ref s => Err(Error::shape("to_spectral", format!("expected T×C×H×W frames, got {:?}", s))),
        }
    }

    pub fn freqs(&self) -> usize {
        self.block * self.block
    }

    pub fn rows(&self) -> usize {
        self.padded_height / self.block
    }

    pub fn cols(&self) -> usize {
        self.padded_width / self.block
    }

    pub fn frame_shape(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    pub fn spectral_shape(&self) -> [usize; 5] {
        [self.frames, self.freqs(), self.channels, self.rows(), self.cols()]
    }

    pub fn pad_bottom(&self) -> usize {
        self.padded_height - self.height
    }

    pub fn pad_right(&self) -> usize {
        self.padded_width - self.width
    }

    /// Same geometry with a different channel count.
    pub fn with_channels(&self, channels: usize) -> Self {
        SpectralGeometry { channels, ..self.clone() }
    }

    /// Same geometry with a different frame count.
    pub fn with_frames(&self, frames: usize) -> Self {
        SpectralGeometry { frames, ..self.clone() }
    }

    /// Flat index into the spectral layout.
    pub fn spectral_index(&self, t: usize, f: usize, c: usize, r: usize, q: usize) -> usize {
        (((t * self.freqs() + f) * self.channels + c) * self.rows() + r) * self.cols() + q
    }

    /// Linear operator frames → spectral map, with reflective padding folded in.
    pub fn forward_map(&self, dct: &BlockDct) -> Result<SparseMap> {
        self.check_dct(dct)?;
        let (b, h, w) = (self.block, self.height, self.width);
        let [_, nf, nc, nr, nq] = self.spectral_shape();
        let out_len = self.frames * nf * nc * nr * nq;
        SparseMap::from_rows(self.frames * nc * h * w, out_len, |idx, e| {
            let q = idx % nq;
            let r = (idx / nq) % nr;
            let c = (idx / (nq * nr)) % nc;
            let f = (idx / (nq * nr * nc)) % nf;
            let t = idx / (nq * nr * nc * nf);
            let (u, v) = (f / b, f % b);
            let plane = (t * nc + c) * h * w;
            for x in 0..b {
                let row = reflect(r * b + x, h);
                let cu = dct.coef(u, x);
                for y in 0..b {
                    let col = reflect(q * b + y, w);
                    e.push((plane + row * w + col, cu * dct.coef(v, y)));
                }
            }
        })
    }

    /// Linear operator spectral map → frames, dropping the padding.
    pub fn inverse_map(&self, dct: &BlockDct) -> Result<SparseMap> {
        self.check_dct(dct)?;
        let (b, h, w) = (self.block, self.height, self.width);
        let [_, nf, nc, _, _] = self.spectral_shape();
        let in_len = self.frames * nf * nc * self.rows() * self.cols();
        SparseMap::from_rows(in_len, self.frames * nc * h * w, |idx, e| {
            let col = idx % w;
            let row = (idx / w) % h;
            let c = (idx / (w * h)) % nc;
            let t = idx / (w * h * nc);
            let (r, x) = (row / b, row % b);
            let (q, y) = (col / b, col % b);
            for u in 0..b {
                let cu = dct.coef(u, x);
                for v in 0..b {
                    e.push((self.spectral_index(t, u * b + v, c, r, q), cu * dct.coef(v, y)));
                }
            }
        })
    }

    fn check_dct(&self, dct: &BlockDct) -> Result<()> {
        if dct.size() != self.block {
            return Err(Error::invalid(format!(
                "DCT of size {} used with geometry of block {}",
                dct.size(),
                self.block
            )));
        }
        Ok(())
    }

    fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("block", self.block);
        kv.set("frames", self.frames);
        kv.set("channels", self.channels);
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("pad_bottom", self.pad_bottom());
        kv.set("pad_right", self.pad_right());
        kv
    }

    fn from_kv(kv: &KvFile) -> Result<Self> {
        let height: usize = kv.parse_value("height")?;
        let width: usize = kv.parse_value("width")?;
        let geom = SpectralGeometry {
            frames: kv.parse_value("frames")?,
            channels: kv.parse_value("channels")?,
            height,
            width,
            block: kv.parse_value("block")?,
            padded_height: height + kv.parse_value::<usize>("pad_bottom")?,
            padded_width: width + kv.parse_value::<usize>("pad_right")?,
        };
        if geom.block == 0 || geom.padded_height % geom.block != 0 || geom.padded_width % geom.block != 0 {
            return Err(Error::format("spectral sidecar", "padded extents are not multiples of the block"));
        }
        Ok(geom)
    }
}

/// DCT-domain representation of a frame sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralMap {
    pub data: Tensor,
    pub geometry: SpectralGeometry,
}

impl SpectralMap {
    pub fn new(data: Tensor, geometry: SpectralGeometry) -> Result<Self> {
        if data.shape() != geometry.spectral_shape() {
            return Err(Error::shape(
                "SpectralMap::new",
                format!("{:?} vs geometry {:?}", data.shape(), geometry.spectral_shape()),
            ));
        }
        Ok(SpectralMap { data, geometry })
    }

    pub fn block(&self) -> usize {
        self.geometry.block
    }

    pub fn energy(&self) -> f64 {
        self.data.data().iter().map(|v| v * v).sum()
    }

    /// Writes `path` as an FTT tensor and `path.meta` as the geometry sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_ftt(path, &self.data, Dtype::F64)?;
        self.geometry.to_kv().save(sidecar_path(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let geometry = SpectralGeometry::from_kv(&KvFile::load(sidecar_path(path))?)?;
        SpectralMap::new(read_ftt(path)?, geometry)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    s.into()
}

/// Block DCT of `T×C×H×W` frames, padded to multiples of `block`.
pub fn to_spectral(frames: &Tensor, block: usize) -> Result<SpectralMap> {
    to_spectral_aligned(frames, block, 1)
}

/// As [`to_spectral`], padding to multiples of `block · align_cells` so the
/// spectral extents are divisible by `align_cells`.
pub fn to_spectral_aligned(frames: &Tensor, block: usize, align_cells: usize) -> Result<SpectralMap> {
    let geometry = SpectralGeometry::for_frames(frames, block, align_cells)?;
    let dct = BlockDct::new(block)?;
    let data = geometry.forward_map(&dct)?.apply(frames.data())?;
    SpectralMap::new(Tensor::new(geometry.spectral_shape().to_vec(), data)?, geometry)
}

/// Inverse block DCT with padding removed.
pub fn from_spectral(map: &SpectralMap) -> Result<Tensor> {
    let dct = BlockDct::new(map.geometry.block)?;
    let data = map.geometry.inverse_map(&dct)?.apply(map.data.data())?;
    Tensor::new(map.geometry.frame_shape().to_vec(), data)
}

/// Precomputed differentiable transforms for one geometry.
#[derive(Clone, Debug)]
pub struct SpectralTransform {
    pub geometry: SpectralGeometry,
    forward: Arc<SparseMap>,
    inverse: Arc<SparseMap>,
}

impl SpectralTransform {
    pub fn new(geometry: SpectralGeometry) -> Result<Self> {
        let dct = BlockDct::new(geometry.block)?;
        Ok(SpectralTransform {
            forward: Arc::new(geometry.forward_map(&dct)?),
            inverse: Arc::new(geometry.inverse_map(&dct)?),
            geometry,
        })
    }

    pub fn forward_map(&self) -> &Arc<SparseMap> {
        &self.forward
    }

    pub fn inverse_map(&self) -> &Arc<SparseMap> {
        &self.inverse
    }

    pub fn to_spectral<'t>(&self, frames: Var<'t>) -> Result<Var<'t>> {
        frames.linear_map(&self.forward, &self.geometry.spectral_shape())
    }

    pub fn from_spectral<'t>(&self, map: Var<'t>) -> Result<Var<'t>> {
        map.linear_map(&self.inverse, &self.geometry.frame_shape())
    }
}
