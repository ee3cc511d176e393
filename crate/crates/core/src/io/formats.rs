use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix3x4, Vector2, Vector3};

use super::ParseError;
use crate::epipolar_graph::Keypoint;
use crate::geometry::{
    Camera, EuclideanCamera, Frame, ImageId, Intrinsics, Model, Observation, TiePoint,
    TiePointStatus,
};
use crate::robust::TwoViewModel;
use crate::synthetic::{SceneKind, SceneSpec};

/// Non-blank, non-comment lines with their 1-based numbers.
pub(crate) struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    pub(crate) fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
            last: 0,
        }
    }

    pub(crate) fn next_line(&mut self) -> Option<(usize, &'a str)> {
        for (i, raw) in self.inner.by_ref() {
            self.last = i + 1;
            let line = raw.trim();
            if !line.is_empty() && !line.starts_with('#') {
                return Some((i + 1, line));
            }
        }
        None
    }

    /// The next line, or an error naming the line after the last one read.
    fn expect(&mut self, what: &str) -> Result<(usize, &'a str), ParseError> {
        let after = self.last + 1;
        self.next_line().ok_or_else(|| {
            ParseError::new(after, format!("unexpected end of file, expected {what}"))
        })
    }
}

struct Fields<'a> {
    line: usize,
    it: std::str::SplitWhitespace<'a>,
}

impl<'a> Fields<'a> {
    fn new(line: usize, text: &'a str) -> Self {
        Self {
            line,
            it: text.split_whitespace(),
        }
    }

    fn word(&mut self, what: &str) -> Result<&'a str, ParseError> {
        self.it
            .next()
            .ok_or_else(|| ParseError::new(self.line, format!("missing {what}")))
    }

    fn parse<T: FromStr>(&mut self, what: &str) -> Result<T, ParseError> {
        let w = self.word(what)?;
        w.parse()
            .map_err(|_| ParseError::new(self.line, format!("invalid {what} `{w}`")))
    }

    fn keyword(&mut self, expected: &str) -> Result<(), ParseError> {
        let w = self.word(expected)?;
        if w == expected {
            Ok(())
        } else {
            Err(ParseError::new(
                self.line,
                format!("expected `{expected}`, found `{w}`"),
            ))
        }
    }

    fn floats<const N: usize>(&mut self, what: &str) -> Result<[f64; N], ParseError> {
        let mut out = [0.0; N];
        for v in &mut out {
            *v = self.parse(what)?;
        }
        Ok(out)
    }

    fn end(mut self) -> Result<(), ParseError> {
        match self.it.next() {
            None => Ok(()),
            Some(w) => Err(ParseError::new(
                self.line,
                format!("unexpected trailing field `{w}`"),
            )),
        }
    }
}

fn num(out: &mut String, v: f64) {
    let _ = write!(out, " {v:.16e}");
}

/// Keypoints of one image together with the image size.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointFile {
    pub size: (f64, f64),
    pub keypoints: Vec<Keypoint>,
}

impl KeypointFile {
    /// `size W H`, `keypoints N DIM`, then one `x y scale angle d_1 .. d_DIM`
    /// line per keypoint.
    pub fn to_text(&self) -> String {
        let dim = self.keypoints.first().map_or(0, |k| k.descriptor.len());
        let mut s = String::from("# hsm keypoints\n");
        s.push_str("size");
        num(&mut s, self.size.0);
        num(&mut s, self.size.1);
        let _ = writeln!(s, "\nkeypoints {} {dim}", self.keypoints.len());
        for k in &self.keypoints {
            let mut line = String::new();
            for v in [k.xy.x, k.xy.y, k.scale, k.angle] {
                num(&mut line, v);
            }
            for d in &k.descriptor {
                let _ = write!(line, " {d:.8e}");
            }
            s.push_str(line.trim_start());
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let mut lines = Lines::new(text);
        let (n, l) = lines.expect("`size W H`")?;
        let mut f = Fields::new(n, l);
        f.keyword("size")?;
        let [w, h] = f.floats::<2>("image size")?;
        f.end()?;
        if !(w > 0.0 && h > 0.0) {
            return Err(ParseError::new(n, "image size must be positive"));
        }
        let (n, l) = lines.expect("`keypoints N DIM`")?;
        let mut f = Fields::new(n, l);
        f.keyword("keypoints")?;
        let count: usize = f.parse("keypoint count")?;
        let dim: usize = f.parse("descriptor length")?;
        f.end()?;
        let mut keypoints = Vec::with_capacity(count);
        for i in 0..count {
            let (n, l) = lines.expect(&format!("keypoint {} of {count}", i + 1))?;
            let mut f = Fields::new(n, l);
            let [x, y, scale, angle] = f.floats::<4>("keypoint field")?;
            let descriptor = (0..dim)
                .map(|_| f.parse::<f32>("descriptor entry"))
                .collect::<Result<Vec<_>, _>>()?;
            f.end()?;
            keypoints.push(Keypoint {
                xy: Vector2::new(x, y),
                scale,
                angle,
                descriptor,
            });
        }
        if let Some((n, _)) = lines.next_line() {
            return Err(ParseError::new(n, "content after the declared keypoints"));
        }
        Ok(Self {
            size: (w, h),
            keypoints,
        })
    }
}

/// A verified image pair: model class and keypoint correspondences.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchEdge {
    pub pair: (ImageId, ImageId),
    pub model_class: TwoViewModel,
    pub matches: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchFile {
    pub edges: Vec<MatchEdge>,
}

fn class_name(c: TwoViewModel) -> &'static str {
    match c {
        TwoViewModel::Fundamental => "F",
        TwoViewModel::Homography => "H",
    }
}

impl MatchFile {
    /// `edge A B CLASS N` followed by `N` lines `KA KB`; CLASS is `F` or `H`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# hsm matches\n");
        for e in &self.edges {
            let _ = writeln!(
                s,
                "edge {} {} {} {}",
                e.pair.0,
                e.pair.1,
                class_name(e.model_class),
                e.matches.len()
            );
            for (a, b) in &e.matches {
                let _ = writeln!(s, "{a} {b}");
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let mut lines = Lines::new(text);
        let mut edges = Vec::new();
        while let Some((n, l)) = lines.next_line() {
            let mut f = Fields::new(n, l);
            f.keyword("edge")?;
            let a: ImageId = f.parse("image id")?;
            let b: ImageId = f.parse("image id")?;
            let model_class = match f.word("model class")? {
                "F" => TwoViewModel::Fundamental,
                "H" => TwoViewModel::Homography,
                w => return Err(ParseError::new(n, format!("invalid model class `{w}`"))),
            };
            let count: usize = f.parse("match count")?;
            f.end()?;
            if a == b {
                return Err(ParseError::new(n, "edge joins an image to itself"));
            }
            let mut matches = Vec::with_capacity(count);
            for i in 0..count {
                let (n, l) = lines.expect(&format!("match {} of {count}", i + 1))?;
                let mut f = Fields::new(n, l);
                let ka = f.parse("keypoint index")?;
                let kb = f.parse("keypoint index")?;
                f.end()?;
                matches.push((ka, kb));
            }
            edges.push(MatchEdge {
                pair: (a, b),
                model_class,
                matches,
            });
        }
        Ok(Self { edges })
    }
}

/// One `ID FX FY SKEW CX CY` line per calibrated image.
pub fn intrinsics_to_text(k: &BTreeMap<ImageId, Intrinsics>) -> String {
    let mut s = String::from("# hsm intrinsics\n");
    for (id, k) in k {
        let _ = write!(s, "{id}");
        for v in [k.fx, k.fy, k.skew, k.cx, k.cy] {
            num(&mut s, v);
        }
        s.push('\n');
    }
    s
}

pub fn parse_intrinsics(text: &str) -> Result<BTreeMap<ImageId, Intrinsics>, ParseError> {
    let mut lines = Lines::new(text);
    let mut out = BTreeMap::new();
    while let Some((n, l)) = lines.next_line() {
        let mut f = Fields::new(n, l);
        let id: ImageId = f.parse("image id")?;
        let [fx, fy, skew, cx, cy] = f.floats::<5>("intrinsic parameter")?;
        f.end()?;
        let k = Intrinsics::new(fx, fy, skew, cx, cy)
            .map_err(|e| ParseError::new(n, format!("invalid intrinsics: {e}")))?;
        if out.insert(id, k).is_some() {
            return Err(ParseError::new(n, format!("duplicate image id {id}")));
        }
    }
    Ok(out)
}

fn frame_name(f: Frame) -> &'static str {
    match f {
        Frame::Euclidean => "euclidean",
        Frame::Projective => "projective",
    }
}

fn parse_frame(w: &str, line: usize) -> Result<Frame, ParseError> {
    match w {
        "euclidean" => Ok(Frame::Euclidean),
        "projective" => Ok(Frame::Projective),
        _ => Err(ParseError::new(line, format!("invalid frame `{w}`"))),
    }
}

/// Camera file. Every line holds the id, the kind and the 12 entries of the
/// camera matrix in row order; Euclidean cameras then carry
/// `FX FY SKEW CX CY RADIAL`, the 9 rotation entries in row order and the
/// centre.
pub fn cameras_to_text(model: &Model) -> String {
    let mut s = format!("# hsm cameras\nframe {}\n", frame_name(model.frame));
    for (id, cam) in &model.cameras {
        let p = cam.matrix();
        let _ = write!(
            s,
            "{id} {}",
            frame_name(match cam {
                Camera::Euclidean(_) => Frame::Euclidean,
                Camera::Projective(_) => Frame::Projective,
            })
        );
        for r in 0..3 {
            for c in 0..4 {
                num(&mut s, p[(r, c)]);
            }
        }
        if let Camera::Euclidean(e) = cam {
            let k = &e.intrinsics;
            for v in [k.fx, k.fy, k.skew, k.cx, k.cy, e.radial] {
                num(&mut s, v);
            }
            for r in 0..3 {
                for c in 0..3 {
                    num(&mut s, e.rotation[(r, c)]);
                }
            }
            for v in e.center.iter() {
                num(&mut s, *v);
            }
        }
        s.push('\n');
    }
    s
}

/// Cameras and frame of a model; tie-points are left empty.
pub fn parse_cameras(text: &str) -> Result<Model, ParseError> {
    let mut lines = Lines::new(text);
    let (n, l) = lines.expect("`frame KIND`")?;
    let mut f = Fields::new(n, l);
    f.keyword("frame")?;
    let frame = parse_frame(f.word("frame")?, n)?;
    f.end()?;
    let mut model = Model::new(frame);
    while let Some((n, l)) = lines.next_line() {
        let mut f = Fields::new(n, l);
        let id: ImageId = f.parse("camera id")?;
        let kind = parse_frame(f.word("camera kind")?, n)?;
        let p = f.floats::<12>("matrix entry")?;
        let cam = match kind {
            Frame::Projective => Camera::Projective(Matrix3x4::from_row_slice(&p)),
            Frame::Euclidean => {
                let [fx, fy, skew, cx, cy, radial] = f.floats::<6>("intrinsic parameter")?;
                let r = f.floats::<9>("rotation entry")?;
                let c = f.floats::<3>("centre coordinate")?;
                let k = Intrinsics::new(fx, fy, skew, cx, cy)
                    .map_err(|e| ParseError::new(n, format!("invalid intrinsics: {e}")))?;
                let mut cam =
                    EuclideanCamera::new(k, Matrix3::from_row_slice(&r), Vector3::from(c));
                cam.radial = radial;
                Camera::Euclidean(cam)
            }
        };
        f.end()?;
        if frame == Frame::Projective && kind == Frame::Euclidean {
            return Err(ParseError::new(n, "Euclidean camera in a projective model"));
        }
        if model.cameras.insert(id, cam).is_some() {
            return Err(ParseError::new(n, format!("duplicate camera id {id}")));
        }
    }
    Ok(model)
}

fn status_name(s: TiePointStatus) -> &'static str {
    match s {
        TiePointStatus::Pending => "pending",
        TiePointStatus::Triangulated => "triangulated",
        TiePointStatus::Rejected => "rejected",
    }
}

/// Tie-point file: `TRACK STATUS [X Y Z] N` followed by `IMAGE KEYPOINT U V`
/// for each of the `N` observations, all on one line. Coordinates are present
/// only when the status is `triangulated`.
pub fn tie_points_to_text(model: &Model) -> String {
    let mut s = String::from("# hsm tie-points\n");
    for (tid, tp) in &model.tie_points {
        let _ = write!(s, "{tid} {}", status_name(tp.status));
        if tp.status == TiePointStatus::Triangulated {
            let x = tp.position.unwrap_or_else(Vector3::zeros);
            for v in x.iter() {
                num(&mut s, *v);
            }
        }
        let _ = write!(s, " {}", tp.track.len());
        for o in &tp.track {
            let _ = write!(s, " {} {}", o.image, o.keypoint);
            num(&mut s, o.xy.x);
            num(&mut s, o.xy.y);
        }
        s.push('\n');
    }
    s
}

pub fn parse_tie_points(text: &str) -> Result<BTreeMap<usize, TiePoint>, ParseError> {
    let mut lines = Lines::new(text);
    let mut out = BTreeMap::new();
    while let Some((n, l)) = lines.next_line() {
        let mut f = Fields::new(n, l);
        let tid: usize = f.parse("track id")?;
        let status = match f.word("status")? {
            "pending" => TiePointStatus::Pending,
            "triangulated" => TiePointStatus::Triangulated,
            "rejected" => TiePointStatus::Rejected,
            w => return Err(ParseError::new(n, format!("invalid status `{w}`"))),
        };
        let position = (status == TiePointStatus::Triangulated)
            .then(|| f.floats::<3>("point coordinate").map(Vector3::from))
            .transpose()?;
        let count: usize = f.parse("observation count")?;
        let mut track = Vec::with_capacity(count);
        for _ in 0..count {
            let image = f.parse("image id")?;
            let keypoint = f.parse("keypoint index")?;
            let [u, v] = f.floats::<2>("observation coordinate")?;
            track.push(Observation {
                image,
                keypoint,
                xy: Vector2::new(u, v),
            });
        }
        f.end()?;
        let mut tp = TiePoint::new(track).map_err(|e| ParseError::new(n, e.to_string()))?;
        tp.status = status;
        tp.position = position;
        if out.insert(tid, tp).is_some() {
            return Err(ParseError::new(n, format!("duplicate track id {tid}")));
        }
    }
    Ok(out)
}

/// ASCII polygon-format point cloud of the triangulated tie-points, with the
/// track id and track length of every vertex.
pub fn point_cloud_to_ply(model: &Model) -> String {
    let pts: Vec<(usize, &TiePoint)> = model.triangulated().collect();
    let mut s = String::from("ply\nformat ascii 1.0\ncomment hsm point cloud\n");
    let _ = writeln!(s, "element vertex {}", pts.len());
    for p in [
        "double x",
        "double y",
        "double z",
        "int track_id",
        "int track_length",
    ] {
        let _ = writeln!(s, "property {p}");
    }
    s.push_str("end_header\n");
    for (tid, tp) in pts {
        let x = tp.position.expect("triangulated");
        let _ = writeln!(
            s,
            "{:.16e} {:.16e} {:.16e} {tid} {}",
            x.x,
            x.y,
            x.z,
            tp.track.len()
        );
    }
    s
}

/// Synthetic scene description as `key = value` lines.
pub fn scene_spec_to_text(s: &SceneSpec) -> String {
    format!(
        "# hsm synthetic scene\nkind = {}\ncameras = {}\npoints = {}\nnoise = {:.16e}\n\
         outliers = {:.16e}\nseed = {}\nwidth = {:.16e}\nheight = {:.16e}\nfocal = {:.16e}\n",
        s.kind.name(),
        s.n_cameras,
        s.n_points,
        s.noise_sigma,
        s.outlier_rate,
        s.seed,
        s.image_size.0,
        s.image_size.1,
        s.focal
    )
}

pub fn parse_scene_spec(text: &str) -> Result<SceneSpec, ParseError> {
    let mut values = BTreeMap::new();
    let mut lines = Lines::new(text);
    while let Some((n, l)) = lines.next_line() {
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| ParseError::new(n, "expected `key = value`"))?;
        values.insert(k.trim().to_string(), (n, v.trim().to_string()));
    }
    let last = text.lines().count() + 1;
    let get = |k: &str| -> Result<(usize, &str), ParseError> {
        values
            .get(k)
            .map(|(n, v)| (*n, v.as_str()))
            .ok_or_else(|| ParseError::new(last, format!("missing key `{k}`")))
    };
    fn num<T: FromStr>(k: &str, (n, v): (usize, &str)) -> Result<T, ParseError> {
        v.parse()
            .map_err(|_| ParseError::new(n, format!("invalid {k} `{v}`")))
    }
    let (n, kind) = get("kind")?;
    let kind = SceneKind::parse(kind)
        .ok_or_else(|| ParseError::new(n, format!("unknown scene kind `{kind}`")))?;
    let mut spec = SceneSpec::new(
        kind,
        num("cameras", get("cameras")?)?,
        num("points", get("points")?)?,
        num("seed", get("seed")?)?,
    );
    spec.noise_sigma = num("noise", get("noise")?)?;
    spec.outlier_rate = num("outliers", get("outliers")?)?;
    spec.image_size = (num("width", get("width")?)?, num("height", get("height")?)?);
    spec.focal = num("focal", get("focal")?)?;
    Ok(spec)
}
