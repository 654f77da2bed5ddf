//! On-disk scene format.
//!
//! ```text
//! <scene>/depth.png   16-bit grayscale, depth in millimeters (0 = no return)
//! <scene>/mask.png    8-bit grayscale, instance id (0 = background)
//! <scene>/camera.txt  fx, fy, cx, cy, width, height, one per line
//! <scene>/gt.txt      id r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2 dx dy dz
//! ```

use std::cell::Cell;
use std::fs;
use std::io::{BufRead, Cursor, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::scenegen::{GtInstance, Scene};
use crate::types::{BoxDims, CameraIntrinsics, DepthImage, InstanceMask, Pose};

pub const DEPTH_FILE: &str = "depth.png";
pub const MASK_FILE: &str = "mask.png";
pub const CAMERA_FILE: &str = "camera.txt";
pub const GT_FILE: &str = "gt.txt";

fn parse_err(file: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: &[u8],
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let w = std::io::BufWriter::new(file);
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)?;
    Ok(())
}

/// In-memory reader that remembers the furthest byte handed out, so decode
/// errors can report where they happened.
struct Tracked<'a> {
    inner: Cursor<&'a [u8]>,
    furthest: &'a Cell<u64>,
}

impl Tracked<'_> {
    fn note(&self) {
        let p = self.inner.position();
        if p > self.furthest.get() {
            self.furthest.set(p);
        }
    }
}

impl Read for Tracked<'_> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.note();
        Ok(n)
    }
}

impl BufRead for Tracked<'_> {
    fn fill_buf(&mut self) -> std::io::Result<&[u8]> {
        self.inner.fill_buf()
    }

    fn consume(&mut self, amt: usize) {
        self.inner.consume(amt);
        self.note();
    }
}

impl Seek for Tracked<'_> {
    fn seek(&mut self, pos: SeekFrom) -> std::io::Result<u64> {
        let p = self.inner.seek(pos)?;
        self.note();
        Ok(p)
    }
}

/// Decodes a grayscale PNG of the given bit depth; returns width, height and
/// raw (big-endian for 16-bit) samples.
fn read_png(path: &Path, depth16: bool) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let furthest = Cell::new(0u64);
    let reader = Tracked {
        inner: Cursor::new(&bytes),
        furthest: &furthest,
    };
    let fail = |e: png::DecodingError| parse_err(path, furthest.get(), e.to_string());
    let mut rd = png::Decoder::new(reader).read_info().map_err(fail)?;
    let info = rd.info();
    let (w, h) = (info.width as usize, info.height as usize);
    let want_depth = if depth16 {
        png::BitDepth::Sixteen
    } else {
        png::BitDepth::Eight
    };
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != want_depth {
        return Err(parse_err(
            path,
            furthest.get(),
            format!(
                "expected {}-bit grayscale, found {:?} {:?}",
                if depth16 { 16 } else { 8 },
                info.color_type,
                info.bit_depth
            ),
        ));
    }
    let size = rd
        .output_buffer_size()
        .ok_or_else(|| parse_err(path, furthest.get(), "image too large"))?;
    let mut buf = vec![0u8; size];
    let out = rd.next_frame(&mut buf).map_err(fail)?;
    buf.truncate(out.buffer_size());
    Ok((w, h, buf))
}

pub fn write_depth_png(path: &Path, depth: &DepthImage) -> Result<()> {
    let mut bytes = Vec::with_capacity(depth.data.len() * 2);
    for z in &depth.data {
        let mm = (z * 1000.0).round();
        if !(0.0..=65535.0).contains(&mm) {
            return Err(Error::invalid(format!(
                "depth {z} m not representable in 16-bit mm"
            )));
        }
        bytes.extend_from_slice(&(mm as u16).to_be_bytes());
    }
    write_png(
        path,
        depth.width,
        depth.height,
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        &bytes,
    )
}

pub fn read_depth_png(path: &Path) -> Result<DepthImage> {
    let (w, h, raw) = read_png(path, true)?;
    let data = raw
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 1000.0)
        .collect();
    DepthImage::from_data(w, h, data)
}

pub fn write_mask_png(path: &Path, mask: &InstanceMask) -> Result<()> {
    write_png(
        path,
        mask.width,
        mask.height,
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        &mask.data,
    )
}

/// Writes 8-bit RGB samples, row major.
pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::invalid("rgb buffer size does not match image"));
    }
    write_png(
        path,
        width,
        height,
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        rgb,
    )
}

pub fn read_mask_png(path: &Path) -> Result<InstanceMask> {
    let (w, h, raw) = read_png(path, false)?;
    InstanceMask::from_data(w, h, raw)
}

/// Whitespace-separated tokens with their byte offsets.
fn tokens(text: &str) -> impl Iterator<Item = (u64, &str)> {
    let base = text.as_ptr() as usize;
    text.split_ascii_whitespace()
        .map(move |t| ((t.as_ptr() as usize - base) as u64, t))
}

fn parse_num<T: std::str::FromStr>(path: &Path, off: u64, tok: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| parse_err(path, off, format!("invalid number `{tok}`")))
}

pub fn write_camera(path: &Path, k: &CameraIntrinsics) -> Result<()> {
    let s = format!(
        "{}\n{}\n{}\n{}\n{}\n{}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height
    );
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_camera(path: &Path) -> Result<CameraIntrinsics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let toks: Vec<(u64, &str)> = tokens(&text).collect();
    if toks.len() != 6 {
        return Err(parse_err(
            path,
            text.len() as u64,
            format!("expected 6 fields, found {}", toks.len()),
        ));
    }
    let f = |i: usize| parse_num::<f64>(path, toks[i].0, toks[i].1);
    let n = |i: usize| parse_num::<usize>(path, toks[i].0, toks[i].1);
    CameraIntrinsics::new(f(0)?, f(1)?, f(2)?, f(3)?, n(4)?, n(5)?)
        .map_err(|e| parse_err(path, 0, e.to_string()))
}

pub fn format_gt_line(g: &GtInstance) -> String {
    let r = &g.pose.rotation;
    let t = &g.pose.translation;
    let d = g.dims.as_vector();
    let mut fields = vec![g.id.to_string()];
    for row in 0..3 {
        for col in 0..3 {
            fields.push(r[(row, col)].to_string());
        }
        fields.push(t[row].to_string());
    }
    fields.extend(d.iter().map(|v| v.to_string()));
    fields.join(" ")
}

pub fn write_gt(path: &Path, gt: &[GtInstance]) -> Result<()> {
    let mut s = String::new();
    for g in gt {
        s.push_str(&format_gt_line(g));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_gt(path: &Path) -> Result<Vec<GtInstance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut line_start = 0u64;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        if !body.trim().is_empty() {
            let toks: Vec<(u64, &str)> = tokens(body).map(|(o, t)| (o + line_start, t)).collect();
            if toks.len() != 16 {
                return Err(parse_err(
                    path,
                    line_start,
                    format!("expected 16 fields, found {}", toks.len()),
                ));
            }
            let id: u8 = parse_num(path, toks[0].0, toks[0].1)?;
            let v: Vec<f64> = toks[1..]
                .iter()
                .map(|(o, t)| parse_num::<f64>(path, *o, t))
                .collect::<Result<_>>()?;
            let rot = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
            let t = Vector3::new(v[3], v[7], v[11]);
            let pose = Pose::new(rot, t).map_err(|e| parse_err(path, line_start, e.to_string()))?;
            let dims = BoxDims::new(v[12], v[13], v[14])
                .map_err(|e| parse_err(path, line_start, e.to_string()))?;
            out.push(GtInstance { id, pose, dims });
        }
        line_start += line.len() as u64;
    }
    Ok(out)
}

pub fn write_scene(scene: &Scene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_depth_png(&dir.join(DEPTH_FILE), &scene.depth)?;
    write_mask_png(&dir.join(MASK_FILE), &scene.masks)?;
    write_camera(&dir.join(CAMERA_FILE), &scene.camera)?;
    write_gt(&dir.join(GT_FILE), &scene.gt)
}

pub fn read_scene(dir: &Path) -> Result<Scene> {
    let camera = read_camera(&dir.join(CAMERA_FILE))?;
    let depth_path = dir.join(DEPTH_FILE);
    let depth = read_depth_png(&depth_path)?;
    let mask_path = dir.join(MASK_FILE);
    let masks = read_mask_png(&mask_path)?;
    for (p, w, h) in [
        (&depth_path, depth.width, depth.height),
        (&mask_path, masks.width, masks.height),
    ] {
        if w != camera.width || h != camera.height {
            return Err(parse_err(
                p,
                16,
                format!("size {w}x{h} does not match camera.txt"),
            ));
        }
    }
    let gt = read_gt(&dir.join(GT_FILE))?;
    Ok(Scene {
        depth,
        masks,
        gt,
        camera,
    })
}

pub fn is_scene_dir(dir: &Path) -> bool {
    dir.join(CAMERA_FILE).is_file()
}

/// Scene directories of a dataset: `dir` itself if it holds a scene, else its
/// subdirectories that do, sorted by name.
pub fn scene_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if is_scene_dir(dir) {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_scene_dir(p))
        .collect();
    out.sort();
    Ok(out)
}
