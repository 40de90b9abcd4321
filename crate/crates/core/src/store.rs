//! Versioned single-file bundles for backend models and condition nets.
//!
//! A bundle is a text header followed by a little-endian `f64` payload:
//!
//! ```text
//! DPLDA-BUNDLE
//! format_version 1
//! created 2024-01-01T00:00:00Z
//! kind backend
//! attr mode meta_cal
//! ...
//! class dom1:c0
//! tensor proj.matrix 20 50
//! ...
//! end
//! <payload: every tensor in header order, column-major>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::calibration::MetaCalibration;
use crate::condition_net::ConditionNet;
use crate::error::{Error, Result};
use crate::plda::{Projection, ScoreForm};
use crate::trainer::{BackendModel, CalMode};

pub const BUNDLE_MAGIC: &str = "DPLDA-BUNDLE";
pub const FORMAT_VERSION: u32 = 1;

/// Provenance stored alongside the tensors.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BundleInfo {
    /// Creation timestamp, caller-supplied so that outputs can be made
    /// reproducible.
    pub created: String,
    /// Configuration snapshot, single-line JSON.
    pub config: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BundleKind {
    Backend,
    ConditionNet,
}

impl BundleKind {
    fn as_str(self) -> &'static str {
        match self {
            BundleKind::Backend => "backend",
            BundleKind::ConditionNet => "cnet",
        }
    }
}

struct Tensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Default)]
struct Writer {
    attrs: Vec<(String, String)>,
    classes: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Writer {
    fn attr(&mut self, k: &str, v: impl ToString) {
        self.attrs.push((k.to_owned(), v.to_string()));
    }

    fn matrix(&mut self, name: &str, m: &DMatrix<f64>) {
        self.tensors.push(Tensor {
            name: name.to_owned(),
            dims: vec![m.nrows(), m.ncols()],
            data: m.as_slice().to_vec(),
        });
    }

    fn vector(&mut self, name: &str, v: &DVector<f64>) {
        self.tensors.push(Tensor {
            name: name.to_owned(),
            dims: vec![v.len()],
            data: v.as_slice().to_vec(),
        });
    }

    fn scalar(&mut self, name: &str, v: f64) {
        self.tensors.push(Tensor {
            name: name.to_owned(),
            dims: vec![],
            data: vec![v],
        });
    }

    fn cnet(&mut self, prefix: &str, net: &ConditionNet) {
        self.matrix(&format!("{prefix}w1"), &net.w1);
        self.vector(&format!("{prefix}bn_scale"), &net.bn_scale);
        self.vector(&format!("{prefix}bn_shift"), &net.bn_shift);
        self.vector(&format!("{prefix}running_mean"), &net.running_mean);
        self.vector(&format!("{prefix}running_var"), &net.running_var);
        self.matrix(&format!("{prefix}w2"), &net.w2);
        self.vector(&format!("{prefix}b2"), &net.b2);
        self.matrix(&format!("{prefix}w3"), &net.w3);
        self.vector(&format!("{prefix}b3"), &net.b3);
        self.classes = net.class_names.clone();
    }

    fn encode(&self, kind: BundleKind, info: &BundleInfo) -> Result<Vec<u8>> {
        for s in [&info.created, &info.config]
            .into_iter()
            .chain(&self.classes)
        {
            if s.contains('\n') || s.contains('\r') {
                return Err(Error::invalid("bundle header values must be single-line"));
            }
        }
        let mut head = String::new();
        head.push_str(BUNDLE_MAGIC);
        head.push('\n');
        head.push_str(&format!("format_version {FORMAT_VERSION}\n"));
        head.push_str(&format!("created {}\n", info.created));
        head.push_str(&format!("kind {}\n", kind.as_str()));
        head.push_str(&format!("config {}\n", info.config));
        for (k, v) in &self.attrs {
            head.push_str(&format!("attr {k} {v}\n"));
        }
        for c in &self.classes {
            head.push_str(&format!("class {c}\n"));
        }
        for t in &self.tensors {
            head.push_str("tensor ");
            head.push_str(&t.name);
            for d in &t.dims {
                head.push_str(&format!(" {d}"));
            }
            head.push('\n');
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }
}

struct Reader {
    info: BundleInfo,
    kind: String,
    attrs: BTreeMap<String, String>,
    classes: Vec<String>,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

fn header_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Corrupt("header ends before `end` line".into()))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| Error::Corrupt("header is not UTF-8".into()))
}

impl Reader {
    fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        if header_line(bytes, &mut pos).ok() != Some(BUNDLE_MAGIC) {
            return Err(Error::Corrupt("missing bundle magic".into()));
        }
        let version_line = header_line(bytes, &mut pos)?;
        let found: u32 = version_line
            .strip_prefix("format_version ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Corrupt("missing format_version".into()))?;
        if found != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found,
                supported: FORMAT_VERSION,
            });
        }
        let mut info = BundleInfo::default();
        let mut kind = String::new();
        let mut attrs = BTreeMap::new();
        let mut classes = Vec::new();
        let mut layout: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let line = header_line(bytes, &mut pos)?;
            if line == "end" {
                break;
            }
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "created" => info.created = rest.to_owned(),
                "config" => info.config = rest.to_owned(),
                "kind" => kind = rest.to_owned(),
                "class" => classes.push(rest.to_owned()),
                "attr" => {
                    let (k, v) = rest
                        .split_once(' ')
                        .ok_or_else(|| Error::Corrupt(format!("bad attribute line `{line}`")))?;
                    attrs.insert(k.to_owned(), v.to_owned());
                }
                "tensor" => {
                    let mut parts = rest.split(' ');
                    let name = parts.next().unwrap_or("").to_owned();
                    let dims = parts
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::Corrupt(format!("bad tensor line `{line}`")))?;
                    if name.is_empty() {
                        return Err(Error::Corrupt(format!("bad tensor line `{line}`")));
                    }
                    layout.push((name, dims));
                }
                _ => return Err(Error::Corrupt(format!("unknown header line `{line}`"))),
            }
        }
        let total: usize = layout
            .iter()
            .map(|(_, d)| d.iter().product::<usize>())
            .sum();
        let payload = &bytes[pos..];
        if payload.len() < total * 8 {
            return Err(Error::Corrupt(format!(
                "payload truncated: {} bytes, expected {}",
                payload.len(),
                total * 8
            )));
        }
        if payload.len() > total * 8 {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after payload",
                payload.len() - total * 8
            )));
        }
        let mut tensors = BTreeMap::new();
        let mut off = 0;
        for (name, dims) in layout {
            let n: usize = dims.iter().product();
            let data = payload[off..off + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += 8 * n;
            if tensors.insert(name.clone(), (dims, data)).is_some() {
                return Err(Error::Corrupt(format!("tensor `{name}` appears twice")));
            }
        }
        Ok(Self {
            info,
            kind,
            attrs,
            classes,
            tensors,
        })
    }

    fn attr(&self, k: &str) -> Result<&str> {
        self.attrs
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Corrupt(format!("missing attribute `{k}`")))
    }

    fn attr_usize(&self, k: &str) -> Result<usize> {
        self.attr(k)?
            .parse()
            .map_err(|_| Error::Corrupt(format!("attribute `{k}` is not an integer")))
    }

    fn take(&mut self, name: &str, expected: &[usize]) -> Result<Vec<f64>> {
        let (dims, data) = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::Corrupt(format!("missing tensor `{name}`")))?;
        if dims != expected {
            return Err(Error::Shape {
                name: name.to_owned(),
                expected: expected.to_vec(),
                found: dims,
            });
        }
        Ok(data)
    }

    fn matrix(&mut self, name: &str, r: usize, c: usize) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_vec(r, c, self.take(name, &[r, c])?))
    }

    fn vector(&mut self, name: &str, n: usize) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.take(name, &[n])?))
    }

    fn scalar(&mut self, name: &str) -> Result<f64> {
        Ok(self.take(name, &[])?[0])
    }

    fn cnet(&mut self, prefix: &str) -> Result<ConditionNet> {
        use crate::condition_net::{BOTTLENECK_DIM, HIDDEN_DIM};
        let d = self.attr_usize("cnet_input_dim")?;
        let k = self.classes.len();
        if k < 2 {
            return Err(Error::Corrupt(
                "condition net needs at least two classes".into(),
            ));
        }
        let p = |s: &str| format!("{prefix}{s}");
        let net = ConditionNet {
            w1: self.matrix(&p("w1"), HIDDEN_DIM, d)?,
            bn_scale: self.vector(&p("bn_scale"), HIDDEN_DIM)?,
            bn_shift: self.vector(&p("bn_shift"), HIDDEN_DIM)?,
            running_mean: self.vector(&p("running_mean"), HIDDEN_DIM)?,
            running_var: self.vector(&p("running_var"), HIDDEN_DIM)?,
            w2: self.matrix(&p("w2"), BOTTLENECK_DIM, HIDDEN_DIM)?,
            b2: self.vector(&p("b2"), BOTTLENECK_DIM)?,
            w3: self.matrix(&p("w3"), k, BOTTLENECK_DIM)?,
            b3: self.vector(&p("b3"), k)?,
            class_names: self.classes.clone(),
        };
        if net.running_var.iter().any(|&v| v.is_nan() || v <= 0.0) {
            return Err(Error::Corrupt(
                "condition net has non-positive running variance".into(),
            ));
        }
        Ok(net)
    }

    fn finish(&self) -> Result<()> {
        match self.tensors.keys().next() {
            Some(name) => Err(Error::Corrupt(format!("unexpected tensor `{name}`"))),
            None => Ok(()),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Serialized bytes of a backend model bundle.
pub fn encode_model(model: &BackendModel, info: &BundleInfo) -> Result<Vec<u8>> {
    model.check_consistency()?;
    let mut w = Writer::default();
    w.attr("mode", model.mode.as_str());
    // `{:?}` prints the shortest string that parses back to the same f64.
    w.attr("prior", format!("{:?}", model.prior));
    w.attr("use_gamma", model.meta.use_gamma);
    w.attr("input_dim", model.proj.input_dim());
    w.attr("lda_dim", model.proj.output_dim());
    w.attr("meta_dim", model.meta.meta_dim());
    w.attr("bottleneck_dim", model.meta.bottleneck_dim());
    w.attr("has_cnet", model.cnet.is_some());
    if let Some(net) = &model.cnet {
        w.attr("cnet_input_dim", net.input_dim());
    }
    w.matrix("proj.matrix", &model.proj.matrix);
    w.vector("proj.offset", &model.proj.offset);
    w.matrix("score.lambda", &model.sf.lambda);
    w.matrix("score.gamma", &model.sf.gamma);
    w.vector("score.c", &model.sf.c);
    w.scalar("score.k", model.sf.k);
    let m = &model.meta;
    w.matrix("meta.w", &m.w);
    w.matrix("meta.lambda_a", &m.lambda_a);
    w.matrix("meta.gamma_a", &m.gamma_a);
    w.vector("meta.c_a", &m.c_a);
    w.scalar("meta.k_a", m.k_a);
    w.matrix("meta.lambda_b", &m.lambda_b);
    w.matrix("meta.gamma_b", &m.gamma_b);
    w.vector("meta.c_b", &m.c_b);
    w.scalar("meta.k_b", m.k_b);
    if let Some(net) = &model.cnet {
        w.cnet("cnet.", net);
    }
    w.encode(BundleKind::Backend, info)
}

pub fn decode_model(bytes: &[u8]) -> Result<(BackendModel, BundleInfo)> {
    let mut r = Reader::decode(bytes)?;
    if r.kind != BundleKind::Backend.as_str() {
        return Err(Error::Corrupt(format!(
            "expected a backend bundle, found `{}`",
            r.kind
        )));
    }
    let mode = CalMode::parse(r.attr("mode")?)
        .ok_or_else(|| Error::Corrupt("unknown calibration mode".into()))?;
    let prior: f64 = r
        .attr("prior")?
        .parse()
        .map_err(|_| Error::Corrupt("bad prior".into()))?;
    let use_gamma = r.attr("use_gamma")? == "true";
    let has_cnet = r.attr("has_cnet")? == "true";
    let big_d = r.attr_usize("input_dim")?;
    let d = r.attr_usize("lda_dim")?;
    let k = r.attr_usize("meta_dim")?;
    let b = r.attr_usize("bottleneck_dim")?;

    let proj = Projection {
        matrix: r.matrix("proj.matrix", d, big_d)?,
        offset: r.vector("proj.offset", d)?,
    };
    let sf = ScoreForm {
        lambda: r.matrix("score.lambda", d, d)?,
        gamma: r.matrix("score.gamma", d, d)?,
        c: r.vector("score.c", d)?,
        k: r.scalar("score.k")?,
    };
    let meta = MetaCalibration {
        w: r.matrix("meta.w", k, b)?,
        lambda_a: r.matrix("meta.lambda_a", k, k)?,
        gamma_a: r.matrix("meta.gamma_a", k, k)?,
        c_a: r.vector("meta.c_a", k)?,
        k_a: r.scalar("meta.k_a")?,
        lambda_b: r.matrix("meta.lambda_b", k, k)?,
        gamma_b: r.matrix("meta.gamma_b", k, k)?,
        c_b: r.vector("meta.c_b", k)?,
        k_b: r.scalar("meta.k_b")?,
        use_gamma,
    };
    let cnet = if has_cnet {
        Some(r.cnet("cnet.")?)
    } else {
        None
    };
    r.finish()?;
    let model = BackendModel {
        proj,
        sf,
        meta,
        cnet,
        mode,
        prior,
    };
    model.check_consistency()?;
    Ok((model, r.info))
}

pub fn save_model(model: &BackendModel, info: &BundleInfo, path: &Path) -> Result<()> {
    write_file(path, &encode_model(model, info)?)
}

pub fn load_model(path: &Path) -> Result<(BackendModel, BundleInfo)> {
    decode_model(&read_file(path)?)
}

pub fn encode_cnet(net: &ConditionNet, info: &BundleInfo) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.attr("cnet_input_dim", net.input_dim());
    w.cnet("", net);
    w.encode(BundleKind::ConditionNet, info)
}

pub fn decode_cnet(bytes: &[u8]) -> Result<(ConditionNet, BundleInfo)> {
    let mut r = Reader::decode(bytes)?;
    if r.kind != BundleKind::ConditionNet.as_str() {
        return Err(Error::Corrupt(format!(
            "expected a condition-net bundle, found `{}`",
            r.kind
        )));
    }
    let net = r.cnet("")?;
    r.finish()?;
    Ok((net, r.info))
}

pub fn save_cnet(net: &ConditionNet, info: &BundleInfo, path: &Path) -> Result<()> {
    write_file(path, &encode_cnet(net, info)?)
}

pub fn load_cnet(path: &Path) -> Result<(ConditionNet, BundleInfo)> {
    decode_cnet(&read_file(path)?)
}
