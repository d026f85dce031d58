//! Procedural multi-view dataset: coloured cubes with one glyph per side,
//! rendered face-on from the four canonical azimuths and captioned by a
//! fixed grammar.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{stream, Domain};

pub const RESOLUTION: usize = 32;
pub const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];
pub const CAMERA_RADIUS: f64 = 2.0;
pub const GRAMMAR_VERSION: u32 = 1;

// Geometry in 32-pixel units.
const FACE_MIN: f32 = 6.0;
const FACE_MAX: f32 = 26.0;
pub(crate) const GLYPH_MIN: f32 = 12.0;
const GLYPH_SIZE: f32 = 8.0;

macro_rules! named_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Domain(format!(concat!("unknown ", stringify!($name), " {:?}"), other))),
                }
            }
        }
    };
}

named_enum!(
    /// The eight body/glyph colours.
    Color {
        Red => "red",
        Green => "green",
        Blue => "blue",
        Yellow => "yellow",
        White => "white",
        Black => "black",
        Orange => "orange",
        Purple => "purple",
    }
);

named_enum!(Shape { Circle => "circle", Square => "square", Triangle => "triangle", Cross => "cross" });

named_enum!(
    /// Cube sides in canonical order.
    Side { Front => "front", Right => "right", Back => "back", Left => "left" }
);

impl Color {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Black => [0.0, 0.0, 0.0],
            Color::Orange => [1.0, 0.5, 0.0],
            Color::Purple => [0.5, 0.0, 0.5],
        }
    }

    /// Nearest palette entry in Euclidean RGB distance.
    pub fn nearest(rgb: [f32; 3]) -> Color {
        *Color::ALL
            .iter()
            .min_by(|a, b| {
                let d = |c: &Color| c.rgb().iter().zip(&rgb).map(|(x, y)| (x - y).powi(2)).sum::<f32>();
                d(a).total_cmp(&d(b))
            })
            .unwrap()
    }
}

/// Sides in canonical order, as an array.
pub const SIDES: [Side; 4] = [Side::Front, Side::Right, Side::Back, Side::Left];

impl Side {
    pub fn index(self) -> usize {
        self as usize
    }

    /// Centre of the side's azimuth interval, in degrees.
    pub fn azimuth(self) -> f64 {
        match self {
            Side::Front => 90.0,
            Side::Right => 180.0,
            Side::Back => 270.0,
            Side::Left => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Glyph {
    pub side: Side,
    pub shape: Shape,
    pub color: Color,
}

/// A cube: body colour plus one glyph per side, stored in [`Side::ALL`] order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SceneSpec {
    pub body: Color,
    pub glyphs: [Glyph; 4],
}

impl SceneSpec {
    pub fn glyph(&self, side: Side) -> Glyph {
        self.glyphs[side.index()]
    }

    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.glyphs.iter().enumerate() {
            if g.side != Side::ALL[i] {
                return Err(Error::Domain(format!("glyph {i} is on side {}", g.side)));
            }
            if g.color == self.body {
                return Err(Error::Domain(format!("{} glyph matches body colour {}", g.side, self.body)));
            }
        }
        Ok(())
    }
}

pub fn sample_scene(rng: &mut ChaCha8Rng) -> SceneSpec {
    let body = Color::ALL[rng.random_range(0..Color::ALL.len())];
    let glyphs = SIDES.map(|side| {
        let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
        let color = loop {
            let c = Color::ALL[rng.random_range(0..Color::ALL.len())];
            if c != body {
                break c;
            }
        };
        Glyph { side, shape, color }
    });
    SceneSpec { body, glyphs }
}

/// Camera on a sphere around the origin.
///
/// Azimuth 0 lies along +X and grows counter-clockwise seen from +Z;
/// elevation is measured from the XY plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    pub position: [f64; 3],
    pub unit_position: [f64; 3],
}

impl CameraPose {
    pub fn from_spherical(azimuth: f64, elevation: f64, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite() && azimuth.is_finite() && elevation.is_finite()) {
            return Err(Error::Domain(format!("invalid camera ({azimuth}, {elevation}, {radius})")));
        }
        let azimuth = azimuth.rem_euclid(360.0);
        let (az, el) = (azimuth.to_radians(), elevation.to_radians());
        let unit = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
        Ok(Self { azimuth, elevation, radius, position: unit.map(|u| u * radius), unit_position: unit })
    }

    /// Recovers angles from a position; zero-length positions are rejected.
    pub fn from_position(position: [f64; 3]) -> Result<Self> {
        let radius = position.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(radius > 1e-12) || !radius.is_finite() {
            return Err(Error::Domain("camera position has zero norm".into()));
        }
        let unit = position.map(|v| v / radius);
        let azimuth = unit[1].atan2(unit[0]).to_degrees().rem_euclid(360.0);
        let elevation = unit[2].clamp(-1.0, 1.0).asin().to_degrees();
        Ok(Self { azimuth, elevation, radius, position, unit_position: unit })
    }
}

pub fn camera_for_view(side: Side) -> CameraPose {
    CameraPose::from_spherical(side.azimuth(), 0.0, CAMERA_RADIUS).expect("canonical pose is valid")
}

pub fn camera_for_side_name(name: &str) -> Result<CameraPose> {
    Ok(camera_for_view(name.parse()?))
}

/// Whether a point of the 8x8 glyph box (local units, origin top-left) is inked.
pub fn glyph_contains(shape: Shape, u: f32, v: f32) -> bool {
    let half = GLYPH_SIZE / 2.0;
    match shape {
        Shape::Square => (0.0..GLYPH_SIZE).contains(&u) && (0.0..GLYPH_SIZE).contains(&v),
        Shape::Circle => (u - half).powi(2) + (v - half).powi(2) <= half * half,
        Shape::Triangle => (0.0..GLYPH_SIZE).contains(&v) && (u - half).abs() <= (v + 0.5) / 2.0,
        Shape::Cross => {
            let inside = (0.0..GLYPH_SIZE).contains(&u) && (0.0..GLYPH_SIZE).contains(&v);
            inside && ((u - half).abs() < 1.0 || (v - half).abs() < 1.0)
        }
    }
}

/// Draws one face-on view: gray background, 20x20 body square, 8x8 glyph box.
pub fn rasterize_view(scene: &SceneSpec, side: Side, resolution: usize) -> Image {
    let glyph = scene.glyph(side);
    let mut img = Image::filled(resolution, resolution, BACKGROUND);
    let unit = RESOLUTION as f32 / resolution as f32;
    for y in 0..resolution {
        for x in 0..resolution {
            let (u, v) = ((x as f32 + 0.5) * unit, (y as f32 + 0.5) * unit);
            if !((FACE_MIN..FACE_MAX).contains(&u) && (FACE_MIN..FACE_MAX).contains(&v)) {
                continue;
            }
            let inked = glyph_contains(glyph.shape, u - GLYPH_MIN, v - GLYPH_MIN);
            img.set_pixel(x, y, if inked { glyph.color.rgb() } else { scene.body.rgb() });
        }
    }
    img
}

pub fn caption_view(scene: &SceneSpec, side: Side) -> String {
    let g = scene.glyph(side);
    format!("a {} cube with a {} {} on this side", scene.body, g.color, g.shape)
}

pub fn merge_captions(scene: &SceneSpec) -> String {
    let parts: Vec<String> =
        scene.glyphs.iter().map(|g| format!("a {} {} on the {}", g.color, g.shape, g.side)).collect();
    format!("a {} cube with {}", scene.body, parts.join(" and "))
}

/// `(body, glyph colour, glyph shape)` from a view caption.
pub fn parse_view_caption(caption: &str) -> Option<(Color, Color, Shape)> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    match words.as_slice() {
        ["a", body, "cube", "with", "a", color, shape, "on", "this", "side"] => {
            Some((body.parse().ok()?, color.parse().ok()?, shape.parse().ok()?))
        }
        _ => None,
    }
}

/// Inverse of [`merge_captions`]; sides may appear in any order but each exactly once.
pub fn parse_overall_caption(caption: &str) -> Option<SceneSpec> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let ["a", body, "cube", "with", rest @ ..] = words.as_slice() else { return None };
    let body: Color = body.parse().ok()?;
    let mut glyphs: [Option<Glyph>; 4] = [None; 4];
    let mut chunks = rest.split(|w| *w == "and");
    for chunk in chunks.by_ref() {
        let ["a", color, shape, "on", "the", side] = chunk else { return None };
        let side: Side = side.parse().ok()?;
        let slot = &mut glyphs[side.index()];
        if slot.is_some() {
            return None;
        }
        *slot = Some(Glyph { side, shape: shape.parse().ok()?, color: color.parse().ok()? });
    }
    let glyphs = [glyphs[0]?, glyphs[1]?, glyphs[2]?, glyphs[3]?];
    let scene = SceneSpec { body, glyphs };
    scene.validate().ok()?;
    Some(scene)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlyphRecord {
    pub side: Side,
    pub shape: Shape,
    pub color: Color,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewRecord {
    pub side: Side,
    pub azimuth: f64,
    pub elevation: f64,
    pub file: String,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub id: usize,
    pub body_color: Color,
    pub glyphs: Vec<GlyphRecord>,
    pub overall_caption: String,
    pub views: Vec<ViewRecord>,
}

impl SceneRecord {
    pub fn spec(&self) -> Result<SceneSpec> {
        if self.glyphs.len() != 4 {
            return Err(Error::Format(format!("scene {} has {} glyphs", self.id, self.glyphs.len())));
        }
        let glyphs = [0, 1, 2, 3].map(|i| Glyph {
            side: self.glyphs[i].side,
            shape: self.glyphs[i].shape,
            color: self.glyphs[i].color,
        });
        let spec = SceneSpec { body: self.body_color, glyphs };
        spec.validate().map_err(|e| Error::Format(format!("scene {}: {e}", self.id)))?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub palette: Vec<Color>,
    pub scenes: Vec<SceneRecord>,
}

impl DatasetManifest {
    /// Parses and structurally validates a manifest.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let manifest: DatasetManifest =
            serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        for scene in &manifest.scenes {
            scene.spec()?;
            if scene.views.len() != 4 {
                return Err(Error::Format(format!("scene {} has {} views", scene.id, scene.views.len())));
            }
            for view in &scene.views {
                if view.file.contains("..") || Path::new(&view.file).is_absolute() {
                    return Err(Error::Format(format!("scene {}: unsafe image path {:?}", scene.id, view.file)));
                }
            }
        }
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&bytes)
    }
}

pub fn image_file_name(id: usize, azimuth: f64) -> String {
    format!("images/scene_{id:05}_az{:03}.png", azimuth.round() as i64)
}

/// Scene `index` of the dataset generated from `seed`.
pub fn scene_at(seed: u64, index: usize) -> SceneSpec {
    sample_scene(&mut stream(seed, Domain::Scene, index as u64))
}

pub fn scene_record(id: usize, scene: &SceneSpec) -> SceneRecord {
    SceneRecord {
        id,
        body_color: scene.body,
        glyphs: scene.glyphs.iter().map(|g| GlyphRecord { side: g.side, shape: g.shape, color: g.color }).collect(),
        overall_caption: merge_captions(scene),
        views: Side::ALL
            .iter()
            .map(|&side| {
                let cam = camera_for_view(side);
                ViewRecord {
                    side,
                    azimuth: cam.azimuth,
                    elevation: cam.elevation,
                    file: image_file_name(id, cam.azimuth),
                    caption: caption_view(scene, side),
                }
            })
            .collect(),
    }
}

/// Renders `n` scenes into `out_dir`; output depends only on `(n, seed)`.
pub fn build_dataset(n: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut scenes = Vec::with_capacity(n);
    for id in 0..n {
        let scene = scene_at(seed, id);
        let record = scene_record(id, &scene);
        for view in &record.views {
            rasterize_view(&scene, view.side, RESOLUTION).save_png(&out_dir.join(&view.file))?;
        }
        scenes.push(record);
    }
    let manifest = DatasetManifest { version: GRAMMAR_VERSION, seed, palette: Color::ALL.to_vec(), scenes };
    let path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Decoded training scene: spec, captions and the four view images.
#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub spec: SceneSpec,
    pub overall_caption: String,
    pub captions: [String; 4],
    pub images: [Image; 4],
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<LoadedScene>)> {
    let manifest = DatasetManifest::load(dir)?;
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for record in &manifest.scenes {
        let mut images: Vec<Image> = Vec::with_capacity(4);
        let mut captions: Vec<String> = Vec::with_capacity(4);
        for side in Side::ALL {
            let view = record
                .views
                .iter()
                .find(|v| v.side == *side)
                .ok_or_else(|| Error::Format(format!("scene {} lacks a {side} view", record.id)))?;
            let img = Image::load_png(&dir.join(&view.file))?;
            if img.width != RESOLUTION || img.height != RESOLUTION {
                return Err(Error::Format(format!("{} is {}x{}", view.file, img.width, img.height)));
            }
            images.push(img);
            captions.push(view.caption.clone());
        }
        scenes.push(LoadedScene {
            spec: record.spec()?,
            overall_caption: record.overall_caption.clone(),
            captions: captions.try_into().expect("four captions"),
            images: images.try_into().expect("four images"),
        });
    }
    Ok((manifest, scenes))
}
