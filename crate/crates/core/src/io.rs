//! Binary dataset (`QCE1`) and model (`QCM1`, `QCV1`) files.
//!
//! All integers are little-endian `u32`, all reals little-endian IEEE
//! doubles unless stated otherwise.
//!
//! * `QCE1`: magic `QCEDATA1`, then `version, N, P, T, flags`, then `T N P`
//!   complex values as interleaved `f32` pairs, sample-major. Flag bit 0
//!   marks quantized observations and appends the quantizer as `u32 B`
//!   (`u32::MAX` for infinite resolution) and `f64 Δ`; flag bit 1 appends
//!   the noise variance as `f64`.
//! * `QCM1`: magic `QCMODEL1`, then `version, kind, K, N, L`, `K` weights,
//!   and the covariance payload: full matrices, first column and first row
//!   (Toeplitz), spectra (circulant), or loadings and noise floor (MFA).
//! * `QCV1`: magic `QCVMODL1`, then `version, kind`; a VAE stores `N, L, P`
//!   and its networks (convolution stack only when `P > 1`), a direct
//!   network stores itself. A network is `u32` layer count and per layer
//!   `in, out, activation` followed by the `in x out` weights (row-major)
//!   and `out` biases.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::channels::ObservationDataset;
use crate::error::{Error, Result};
use crate::frontend::{make_pilots, QuantizerSpec};
use crate::linalg::{toeplitz_hermitian, CMatrix, C64};
use crate::mixtures::{CovStructure, GmmModel, MfaModel};
use crate::vae::{Activation, Layer, MlpParams, VaeModel};

const DATA_MAGIC: &[u8; 8] = b"QCEDATA1";
const GMM_MAGIC: &[u8; 8] = b"QCMODEL1";
const NET_MAGIC: &[u8; 8] = b"QCVMODL1";
const VERSION: u32 = 1;
const FLAG_QUANTIZED: u32 = 1;
const FLAG_NOISE: u32 = 2;
const INFINITE_BITS: u32 = u32::MAX;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }

    fn usize(&mut self, v: usize) -> Result<()> {
        self.u32(u32::try_from(v).map_err(|_| format_err(format!("{v} does not fit a u32 field")))?)
    }

    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }

    fn f32(&mut self, v: f32) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }

    fn c64(&mut self, z: C64) -> Result<()> {
        self.f64(z.re)?;
        self.f64(z.im)
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const K: usize>(&mut self) -> Result<[u8; K]> {
        let mut buf = [0u8; K];
        self.0.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => format_err("file ends early"),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }

    fn c64(&mut self) -> Result<C64> {
        Ok(C64::new(self.f64()?, self.f64()?))
    }

    fn expect_end(&mut self) -> Result<()> {
        let mut extra = [0u8; 1];
        match self.0.read(&mut extra)? {
            0 => Ok(()),
            _ => Err(format_err("trailing bytes after payload")),
        }
    }
}

fn create(path: &Path) -> Result<Writer<BufWriter<File>>> {
    Ok(Writer(BufWriter::new(File::create(path)?)))
}

fn open(path: &Path) -> Result<(Reader<BufReader<File>>, [u8; 8])> {
    let mut r = Reader(BufReader::new(File::open(path)?));
    let magic = r.bytes::<8>()?;
    Ok((r, magic))
}

/// Header fields of a `QCE1` file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub version: u32,
    pub antennas: usize,
    pub pilots: usize,
    pub len: usize,
    pub flags: u32,
}

/// Contents of a `QCE1` file.
#[derive(Debug, Clone)]
pub enum DatasetFile {
    /// Channels, `N x T`.
    Channels(CMatrix),
    Observations(ObservationDataset),
}

fn write_samples<W: Write>(w: &mut Writer<W>, samples: &CMatrix) -> Result<()> {
    for col in samples.column_iter() {
        for z in col.iter() {
            w.f32(z.re as f32)?;
            w.f32(z.im as f32)?;
        }
    }
    Ok(())
}

/// Writes channels (`N x T`) as a `QCE1` file. Values are stored in single
/// precision.
pub fn write_channels(path: &Path, h: &CMatrix) -> Result<()> {
    let mut w = create(path)?;
    w.0.write_all(DATA_MAGIC)?;
    for v in [VERSION as usize, h.nrows(), 1, h.ncols(), 0] {
        w.usize(v)?;
    }
    write_samples(&mut w, h)?;
    Ok(w.0.flush()?)
}

/// Writes quantized observations with their quantizer and noise variance.
pub fn write_observations(path: &Path, obs: &ObservationDataset) -> Result<()> {
    let mut w = create(path)?;
    w.0.write_all(DATA_MAGIC)?;
    for v in [VERSION as usize, obs.antennas, obs.pilots.len(), obs.len(), (FLAG_QUANTIZED | FLAG_NOISE) as usize] {
        w.usize(v)?;
    }
    write_samples(&mut w, &obs.samples)?;
    w.u32(obs.quantizer.bits().unwrap_or(INFINITE_BITS))?;
    w.f64(obs.quantizer.delta())?;
    w.f64(obs.sigma2)?;
    Ok(w.0.flush()?)
}

fn read_header<R: Read>(r: &mut Reader<R>) -> Result<DatasetHeader> {
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(format!("unsupported dataset version {version}")));
    }
    let header = DatasetHeader { version, antennas: r.usize()?, pilots: r.usize()?, len: r.usize()?, flags: r.u32()? };
    if header.antennas == 0 || header.pilots == 0 {
        return Err(format_err("dataset dimensions must be positive"));
    }
    Ok(header)
}

/// Reads only the header of a `QCE1` file.
pub fn read_dataset_header(path: &Path) -> Result<DatasetHeader> {
    let (mut r, magic) = open(path)?;
    if &magic != DATA_MAGIC {
        return Err(format_err(format!("{} is not a dataset file", path.display())));
    }
    read_header(&mut r)
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, DatasetFile)> {
    let (mut r, magic) = open(path)?;
    if &magic != DATA_MAGIC {
        return Err(format_err(format!("{} is not a dataset file", path.display())));
    }
    let header = read_header(&mut r)?;
    let quantized = header.flags & FLAG_QUANTIZED != 0;
    let rows = if quantized { header.antennas * header.pilots } else { header.antennas };
    let mut samples = CMatrix::zeros(rows, header.len);
    for t in 0..header.len {
        for i in 0..rows {
            samples[(i, t)] = C64::new(r.f32()? as f64, r.f32()? as f64);
        }
    }
    if !quantized {
        r.expect_end()?;
        return Ok((header, DatasetFile::Channels(samples)));
    }
    let bits = r.u32()?;
    let delta = r.f64()?;
    let quantizer = if bits == INFINITE_BITS { QuantizerSpec::identity() } else { QuantizerSpec::uniform(bits, delta)? };
    let sigma2 = if header.flags & FLAG_NOISE != 0 { r.f64()? } else { f64::NAN };
    r.expect_end()?;
    // Labels are cell midpoints, so re-quantizing undoes the single-precision rounding.
    if !quantizer.is_identity() {
        samples.iter_mut().for_each(|z| *z = quantizer.quantize_scalar(*z));
    }
    let obs = ObservationDataset {
        samples,
        antennas: header.antennas,
        pilots: make_pilots(header.pilots)?,
        sigma2,
        quantizer,
    };
    Ok((header, DatasetFile::Observations(obs)))
}

/// Any trained model the library can persist.
#[derive(Debug, Clone)]
pub enum ModelFile {
    Gmm(GmmModel),
    Mfa(MfaModel),
    Vae(VaeModel),
    Dnn(MlpParams),
}

impl ModelFile {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelFile::Gmm(m) => match m.structure() {
                CovStructure::Full => "gmm-full",
                CovStructure::Toeplitz => "gmm-toeplitz",
                CovStructure::Circulant => "gmm-circulant",
            },
            ModelFile::Mfa(_) => "mfa",
            ModelFile::Vae(_) => "vae",
            ModelFile::Dnn(_) => "dnn",
        }
    }
}

const KIND_MFA: u32 = 3;
const KIND_VAE: u32 = 0;
const KIND_DNN: u32 = 1;

fn structure_code(s: CovStructure) -> u32 {
    match s {
        CovStructure::Full => 0,
        CovStructure::Toeplitz => 1,
        CovStructure::Circulant => 2,
    }
}

fn write_mlp<W: Write>(w: &mut Writer<W>, net: &MlpParams) -> Result<()> {
    w.usize(net.layers().len())?;
    for l in net.layers() {
        w.usize(l.weight.nrows())?;
        w.usize(l.weight.ncols())?;
        w.u32(l.activation.code() as u32)?;
        for v in l.weight.iter().chain(l.bias.iter()) {
            w.f64(*v)?;
        }
    }
    Ok(())
}

fn read_mlp<R: Read>(r: &mut Reader<R>) -> Result<MlpParams> {
    let count = r.usize()?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let (input, output) = (r.usize()?, r.usize()?);
        let code = u8::try_from(r.u32()?).map_err(|_| format_err("activation code out of range"))?;
        let activation = Activation::from_code(code).map_err(|e| format_err(e.to_string()))?;
        let mut weight = Array2::zeros((input, output));
        for v in weight.iter_mut() {
            *v = r.f64()?;
        }
        let mut bias = Array2::zeros((1, output));
        for v in bias.iter_mut() {
            *v = r.f64()?;
        }
        layers.push(Layer { weight, bias, activation });
    }
    MlpParams::new(layers).map_err(|e| format_err(e.to_string()))
}

pub fn save_model(path: &Path, model: &ModelFile) -> Result<()> {
    let mut w = create(path)?;
    match model {
        ModelFile::Gmm(m) => {
            w.0.write_all(GMM_MAGIC)?;
            let n = m.antennas();
            for v in [VERSION, structure_code(m.structure()), m.num_components() as u32, n as u32, 0] {
                w.u32(v)?;
            }
            for &wt in crate::mixtures::MixturePrior::weights(m) {
                w.f64(wt)?;
            }
            match (m.structure(), m.spectra()) {
                (CovStructure::Circulant, Some(spectra)) => {
                    for s in spectra.iter().flatten() {
                        w.f64(*s)?;
                    }
                }
                (CovStructure::Toeplitz, _) => {
                    for c in m.covariances() {
                        for i in 0..n {
                            w.c64(c[(i, 0)])?;
                        }
                        for j in 0..n {
                            w.c64(c[(0, j)])?;
                        }
                    }
                }
                _ => {
                    for c in m.covariances() {
                        for z in c.iter() {
                            w.c64(*z)?;
                        }
                    }
                }
            }
        }
        ModelFile::Mfa(m) => {
            w.0.write_all(GMM_MAGIC)?;
            for v in [VERSION, KIND_MFA, m.num_components() as u32, m.antennas() as u32, m.latent_dim() as u32] {
                w.u32(v)?;
            }
            for &wt in crate::mixtures::MixturePrior::weights(m) {
                w.f64(wt)?;
            }
            for (load, &psi) in m.loadings().iter().zip(m.psi()) {
                for z in load.iter() {
                    w.c64(*z)?;
                }
                w.f64(psi)?;
            }
        }
        ModelFile::Vae(m) => {
            w.0.write_all(NET_MAGIC)?;
            for v in [VERSION, KIND_VAE, m.antennas() as u32, m.latent_dim() as u32, m.pilots() as u32] {
                w.u32(v)?;
            }
            if let Some(c) = m.conv() {
                write_mlp(&mut w, c)?;
            }
            write_mlp(&mut w, m.encoder())?;
            write_mlp(&mut w, m.decoder())?;
        }
        ModelFile::Dnn(net) => {
            w.0.write_all(NET_MAGIC)?;
            w.u32(VERSION)?;
            w.u32(KIND_DNN)?;
            write_mlp(&mut w, net)?;
        }
    }
    Ok(w.0.flush()?)
}

fn read_gmm<R: Read>(r: &mut Reader<R>) -> Result<ModelFile> {
    let kind = r.u32()?;
    let (k, n, l) = (r.usize()?, r.usize()?, r.usize()?);
    if k == 0 || n == 0 || k > 1 << 20 || n > 1 << 16 {
        return Err(format_err(format!("implausible model dimensions K = {k}, N = {n}")));
    }
    let weights = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let bad = |e: Error| format_err(e.to_string());
    let model = match kind {
        0 => {
            let covs = (0..k)
                .map(|_| {
                    let mut c = CMatrix::zeros(n, n);
                    for z in c.iter_mut() {
                        *z = r.c64()?;
                    }
                    Ok(c)
                })
                .collect::<Result<Vec<_>>>()?;
            ModelFile::Gmm(GmmModel::new(weights, covs, CovStructure::Full).map_err(bad)?)
        }
        1 => {
            let covs = (0..k)
                .map(|_| {
                    let col = (0..n).map(|_| r.c64()).collect::<Result<Vec<_>>>()?;
                    let row = (0..n).map(|_| r.c64()).collect::<Result<Vec<_>>>()?;
                    if col.iter().zip(&row).any(|(a, b)| (a - b.conj()).norm() > 1e-12 * (1.0 + a.norm())) {
                        return Err(format_err("Toeplitz first row is not the conjugate of the first column"));
                    }
                    Ok(toeplitz_hermitian(&col))
                })
                .collect::<Result<Vec<_>>>()?;
            ModelFile::Gmm(GmmModel::new(weights, covs, CovStructure::Toeplitz).map_err(bad)?)
        }
        2 => {
            let spectra = (0..k).map(|_| (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()).collect::<Result<Vec<_>>>()?;
            ModelFile::Gmm(GmmModel::from_spectra(weights, spectra).map_err(bad)?)
        }
        KIND_MFA => {
            let mut loadings = Vec::with_capacity(k);
            let mut psi = Vec::with_capacity(k);
            for _ in 0..k {
                let mut w = CMatrix::zeros(n, l);
                for z in w.iter_mut() {
                    *z = r.c64()?;
                }
                loadings.push(w);
                psi.push(r.f64()?);
            }
            ModelFile::Mfa(MfaModel::new(weights, loadings, psi).map_err(bad)?)
        }
        other => return Err(format_err(format!("unknown mixture kind {other}"))),
    };
    r.expect_end()?;
    Ok(model)
}

fn read_net<R: Read>(r: &mut Reader<R>) -> Result<ModelFile> {
    let model = match r.u32()? {
        KIND_VAE => {
            let (n, l, p) = (r.usize()?, r.usize()?, r.usize()?);
            let conv = if p > 1 { Some(read_mlp(r)?) } else { None };
            let encoder = read_mlp(r)?;
            let decoder = read_mlp(r)?;
            ModelFile::Vae(VaeModel::new(n, l, p, conv, encoder, decoder).map_err(|e| format_err(e.to_string()))?)
        }
        KIND_DNN => ModelFile::Dnn(read_mlp(r)?),
        other => return Err(format_err(format!("unknown network kind {other}"))),
    };
    r.expect_end()?;
    Ok(model)
}

/// Reads a `QCM1` or `QCV1` file.
pub fn load_model(path: &Path) -> Result<ModelFile> {
    let (mut r, magic) = open(path)?;
    let expect_version = |r: &mut Reader<_>| -> Result<()> {
        match r.u32()? {
            VERSION => Ok(()),
            v => Err(format_err(format!("unsupported model version {v}"))),
        }
    };
    if &magic == GMM_MAGIC {
        expect_version(&mut r)?;
        read_gmm(&mut r)
    } else if &magic == NET_MAGIC {
        expect_version(&mut r)?;
        read_net(&mut r)
    } else {
        Err(format_err(format!("{} is not a model file", path.display())))
    }
}
