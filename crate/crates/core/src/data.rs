//! Synthetic paired corpus: rasterized scenes plus spoken-style caption
//! frame sequences in one or two "languages".
//!
//! A scene is (shape, color, size, position) — 216 combinations. Captions
//! expand per-language symbols into variable-length frame runs with
//! speaker-dependent duration and amplitude jitter, concatenated without
//! boundary markers. Everything regenerates byte-identically from
//! (seed, config).

use crate::error::{Result, StaError};
use crate::rng::derive_rng;
use crate::tensor::gaussian;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const IMAGE_SIZE: usize = 16;
pub const D_FRAME: usize = 8;
pub const N_SCENE_COMBOS: usize = 216;

// ── scene specification ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneShape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneColor {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneSize {
    Small,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: SceneShape,
    pub color: SceneColor,
    pub size: SceneSize,
    /// Cell of a 3x3 grid, row-major 0..9.
    pub position: u8,
}

pub const ALL_SHAPES: [SceneShape; 3] = [SceneShape::Circle, SceneShape::Square, SceneShape::Triangle];
pub const ALL_COLORS: [SceneColor; 4] = [
    SceneColor::Red,
    SceneColor::Green,
    SceneColor::Blue,
    SceneColor::Yellow,
];
pub const ALL_SIZES: [SceneSize; 2] = [SceneSize::Small, SceneSize::Large];

impl SceneSpec {
    pub fn from_index(idx: usize) -> Result<SceneSpec> {
        if idx >= N_SCENE_COMBOS {
            return Err(StaError::invalid(
                "SceneSpec::from_index",
                format!("index {} outside [0,{})", idx, N_SCENE_COMBOS),
            ));
        }
        let position = (idx % 9) as u8;
        let rest = idx / 9;
        let size = ALL_SIZES[rest % 2];
        let rest = rest / 2;
        let color = ALL_COLORS[rest % 4];
        let shape = ALL_SHAPES[rest / 4];
        Ok(SceneSpec {
            shape,
            color,
            size,
            position,
        })
    }

    pub fn index(&self) -> usize {
        let shape = self.shape as usize;
        let color = self.color as usize;
        let size = self.size as usize;
        ((shape * 4 + color) * 2 + size) * 9 + self.position as usize
    }

    /// Joint shape-and-color class in 0..12, the evaluation target.
    pub fn shape_color_class(&self) -> usize {
        self.shape as usize * 4 + self.color as usize
    }

    /// Parse `shape=circle,color=red,size=large,pos=4`.
    pub fn parse(text: &str) -> Result<SceneSpec> {
        let mut shape = None;
        let mut color = None;
        let mut size = None;
        let mut position = None;
        for part in text.split(',') {
            let (key, value) = part.split_once('=').ok_or_else(|| {
                StaError::invalid("scene", format!("`{}` is not key=value", part))
            })?;
            match key.trim() {
                "shape" => {
                    shape = Some(match value.trim() {
                        "circle" => SceneShape::Circle,
                        "square" => SceneShape::Square,
                        "triangle" => SceneShape::Triangle,
                        other => {
                            return Err(StaError::invalid(
                                "scene",
                                format!("unknown shape `{}`", other),
                            ))
                        }
                    })
                }
                "color" => {
                    color = Some(match value.trim() {
                        "red" => SceneColor::Red,
                        "green" => SceneColor::Green,
                        "blue" => SceneColor::Blue,
                        "yellow" => SceneColor::Yellow,
                        other => {
                            return Err(StaError::invalid(
                                "scene",
                                format!("unknown color `{}`", other),
                            ))
                        }
                    })
                }
                "size" => {
                    size = Some(match value.trim() {
                        "small" => SceneSize::Small,
                        "large" => SceneSize::Large,
                        other => {
                            return Err(StaError::invalid(
                                "scene",
                                format!("unknown size `{}`", other),
                            ))
                        }
                    })
                }
                "pos" | "position" => {
                    let p: u8 = value.trim().parse().map_err(|_| {
                        StaError::invalid("scene", format!("bad position `{}`", value))
                    })?;
                    if p > 8 {
                        return Err(StaError::invalid("scene", "position must be 0..=8"));
                    }
                    position = Some(p);
                }
                other => {
                    return Err(StaError::invalid(
                        "scene",
                        format!("unknown attribute `{}`", other),
                    ))
                }
            }
        }
        Ok(SceneSpec {
            shape: shape.ok_or_else(|| StaError::invalid("scene", "missing shape"))?,
            color: color.ok_or_else(|| StaError::invalid("scene", "missing color"))?,
            size: size.ok_or_else(|| StaError::invalid("scene", "missing size"))?,
            position: position.ok_or_else(|| StaError::invalid("scene", "missing pos"))?,
        })
    }
}

// ── rendering ───────────────────────────────────────────────────────

const BACKGROUND: [f64; 3] = [0.15, 0.15, 0.17];

pub fn color_rgb(color: SceneColor) -> [f64; 3] {
    match color {
        SceneColor::Red => [0.85, 0.10, 0.10],
        SceneColor::Green => [0.10, 0.75, 0.15],
        SceneColor::Blue => [0.12, 0.20, 0.85],
        SceneColor::Yellow => [0.90, 0.85, 0.10],
    }
}

fn cell_center(cell: u8) -> (f64, f64) {
    let col = (cell % 3) as f64;
    let row = (cell / 3) as f64;
    (3.0 + 5.0 * col, 3.0 + 5.0 * row)
}

fn in_shape(spec: &SceneSpec, x: usize, y: usize) -> bool {
    let (cx, cy) = cell_center(spec.position);
    // radii picked per shape so both sizes rasterize distinctly on the
    // integer grid
    let r = match (spec.shape, spec.size) {
        (SceneShape::Square, SceneSize::Small) => 1.7,
        (_, SceneSize::Small) => 2.2,
        (_, SceneSize::Large) => 2.6,
    };
    let dx = x as f64 - cx;
    let dy = y as f64 - cy;
    match spec.shape {
        SceneShape::Circle => dx * dx + dy * dy <= r * r,
        SceneShape::Square => dx.abs() <= r && dy.abs() <= r,
        SceneShape::Triangle => {
            // apex up; width grows toward the base, clipped to r
            dy >= -r && dy <= r && dx.abs() <= ((dy + r) * 0.9).min(r)
        }
    }
}

/// Deterministic rasterization to `[H*W, 3]` values in [0,1]; no
/// anti-aliasing, so renders are bit-reproducible.
pub fn render(spec: &SceneSpec) -> Vec<f64> {
    let rgb = color_rgb(spec.color);
    let mut image = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE * 3);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let px = if in_shape(spec, x, y) { rgb } else { BACKGROUND };
            image.extend_from_slice(&px);
        }
    }
    image
}

// ── languages and captions ──────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    A,
    B,
}

impl Language {
    pub fn tag(&self) -> &'static str {
        match self {
            Language::A => "a",
            Language::B => "b",
        }
    }

    pub fn parse(s: &str) -> Result<Language> {
        match s {
            "a" | "A" => Ok(Language::A),
            "b" | "B" => Ok(Language::B),
            other => Err(StaError::invalid(
                "Language::parse",
                format!("unknown language `{}` (registered: a, b)", other),
            )),
        }
    }
}

/// Continuous frame-level caption features, `[L, D_FRAME]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionSequence {
    pub frames: Vec<f64>,
}

impl CaptionSequence {
    pub fn len(&self) -> usize {
        self.frames.len() / D_FRAME
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Symbols 0..19 belong to language A, 19..38 to language B; the
/// vocabularies are disjoint by construction.
const SYMBOLS_PER_LANG: usize = 19;
const FILLER: usize = 18; // per-language offset of the filler word

fn symbol_id(lang: Language, local: usize) -> usize {
    match lang {
        Language::A => local,
        Language::B => SYMBOLS_PER_LANG + local,
    }
}

fn local_symbols(spec: &SceneSpec) -> [usize; 4] {
    // local ids: shapes 0..3, colors 3..7, sizes 7..9, positions 9..18
    [
        spec.shape as usize,
        3 + spec.color as usize,
        7 + spec.size as usize,
        9 + spec.position as usize,
    ]
}

/// Ordered symbol program for a caption; word order differs per language.
pub fn caption_symbols(spec: &SceneSpec, lang: Language) -> Vec<usize> {
    let [shape, color, size, pos] = local_symbols(spec);
    let order: Vec<usize> = match lang {
        // language A: filler, size, color, shape, position
        Language::A => vec![FILLER, size, color, shape, pos],
        // language B: position, shape, color, size, filler
        Language::B => vec![pos, shape, color, size, FILLER],
    };
    order.into_iter().map(|l| symbol_id(lang, l)).collect()
}

/// Per-language random orthogonal basis of frame space; each symbol's
/// carrier direction comes from it.
fn language_basis(lang_id: usize) -> Vec<f64> {
    let mut rng = derive_rng(0x5354_4143, "language-basis", &[lang_id as u64]);
    let mut q = vec![0.0; D_FRAME * D_FRAME];
    for v in q.iter_mut() {
        *v = gaussian(&mut rng);
    }
    // Gram-Schmidt rows
    for i in 0..D_FRAME {
        for j in 0..i {
            let dot: f64 = (0..D_FRAME).map(|k| q[i * D_FRAME + k] * q[j * D_FRAME + k]).sum();
            for k in 0..D_FRAME {
                let vj = q[j * D_FRAME + k];
                q[i * D_FRAME + k] -= dot * vj;
            }
        }
        let norm: f64 = (0..D_FRAME)
            .map(|k| q[i * D_FRAME + k].powi(2))
            .sum::<f64>()
            .sqrt();
        for k in 0..D_FRAME {
            q[i * D_FRAME + k] /= norm;
        }
    }
    q
}

/// Carrier direction for a local symbol id: basis rows, their negations,
/// then pairwise blends — mutually well separated in cosine.
fn symbol_anchor(lang_id: usize, local: usize) -> Vec<f64> {
    let q = language_basis(lang_id);
    let row = |i: usize| q[i * D_FRAME..(i + 1) * D_FRAME].to_vec();
    if local < D_FRAME {
        row(local)
    } else if local < 2 * D_FRAME {
        row(local - D_FRAME).into_iter().map(|v| -v).collect()
    } else {
        let a = row(local - 2 * D_FRAME);
        let b = row((local - 2 * D_FRAME + 4) % D_FRAME);
        a.into_iter()
            .zip(b)
            .map(|(x, y)| (x + y) / std::f64::consts::SQRT_2)
            .collect()
    }
}

/// Frame template per symbol: a carrier direction under a slow amplitude
/// ramp plus fixed per-frame variation. Deterministic in the symbol id
/// alone, shared by every corpus.
fn symbol_template(symbol: usize) -> Vec<f64> {
    let (lang_id, local) = if symbol < SYMBOLS_PER_LANG {
        (0, symbol)
    } else {
        (1, symbol - SYMBOLS_PER_LANG)
    };
    let anchor = symbol_anchor(lang_id, local);
    let mut rng = derive_rng(0x5354_4143, "symbol-template", &[symbol as u64]);
    let len = 5 + (symbol * 7 + 3) % 4; // 5..8 frames
    let mut frames = Vec::with_capacity(len * D_FRAME);
    for j in 0..len {
        let ramp = 0.9 + 0.5 * j as f64 / len as f64;
        for k in 0..D_FRAME {
            frames.push(ramp * anchor[k] + 0.6 * gaussian(&mut rng));
        }
    }
    frames
}

struct SpeakerProfile {
    duration: f64,
    gain: f64,
    timbre: Vec<f64>,
}

fn speaker_profile(lang: Language, speaker: u32) -> SpeakerProfile {
    let mut rng = derive_rng(
        0x5350_4b52,
        "speaker-profile",
        &[lang as u64, speaker as u64],
    );
    let duration = rng.random_range(0.75..1.45);
    let gain = rng.random_range(0.8..1.25);
    let timbre = (0..D_FRAME).map(|_| 0.15 * gaussian(&mut rng)).collect();
    SpeakerProfile {
        duration,
        gain,
        timbre,
    }
}

/// Expand a scene's symbol program into continuous frames. Length varies
/// with speaker and rng; symbol boundaries are not marked.
pub fn synthesize_caption(
    spec: &SceneSpec,
    lang: Language,
    speaker: u32,
    rng: &mut ChaCha8Rng,
) -> CaptionSequence {
    let profile = speaker_profile(lang, speaker);
    let mut frames = Vec::new();
    for sym in caption_symbols(spec, lang) {
        let template = symbol_template(sym);
        let t_len = template.len() / D_FRAME;
        let stretch: f64 = profile.duration * rng.random_range(0.85..1.15);
        let out_len = ((t_len as f64 * stretch).round() as usize).max(2);
        for j in 0..out_len {
            let src = (j * t_len) / out_len;
            for k in 0..D_FRAME {
                let v = template[src * D_FRAME + k] * profile.gain
                    + profile.timbre[k]
                    + 0.08 * gaussian(rng);
                frames.push(v);
            }
        }
    }
    CaptionSequence { frames }
}

// ── corpus ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: usize,
    pub image: String,
    /// Caption file path per language tag.
    pub captions: BTreeMap<String, String>,
    pub languages: Vec<Language>,
    pub speaker: u32,
    pub scene: SceneSpec,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub n_scenes: usize,
    pub languages: Vec<Language>,
    pub speakers_per_caption: u32,
    pub records: Vec<CorpusRecord>,
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub n_scenes: usize,
    pub languages: Vec<Language>,
    pub speakers_per_caption: u32,
    pub repeat_factor: usize,
    pub test_fraction: f64,
    pub dev_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_scenes: 200,
            languages: vec![Language::A, Language::B],
            speakers_per_caption: 2,
            repeat_factor: 1,
            test_fraction: 0.2,
            dev_fraction: 0.15,
        }
    }
}

/// Greedy balanced subset/partition helper: picks items one at a time,
/// always taking the scene that minimizes squared deviation of the
/// per-attribute-value counts from proportional targets.
fn greedy_balanced(pool: &[usize], want: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut remaining: Vec<usize> = pool.to_vec();
    // seeded shuffle decides tie-breaks
    for i in (1..remaining.len()).rev() {
        let j = rng.random_range(0..=i);
        remaining.swap(i, j);
    }
    let mut counts = [[0usize; 9]; 4]; // shape(3) color(4) size(2) position(9)
    let dims = [3usize, 4, 2, 9];
    let mut chosen = Vec::with_capacity(want);
    for round in 0..want {
        let target = (round + 1) as f64;
        let mut best_idx = 0;
        let mut best_score = f64::INFINITY;
        for (i, &combo) in remaining.iter().enumerate() {
            let spec = SceneSpec::from_index(combo % N_SCENE_COMBOS).unwrap();
            let vals = [
                spec.shape as usize,
                spec.color as usize,
                spec.size as usize,
                spec.position as usize,
            ];
            let mut score = 0.0;
            for a in 0..4 {
                for v in 0..dims[a] {
                    let goal = target / dims[a] as f64;
                    let c = counts[a][v] as f64 + if vals[a] == v { 1.0 } else { 0.0 };
                    score += (c - goal) * (c - goal);
                }
            }
            if score < best_score {
                best_score = score;
                best_idx = i;
            }
        }
        let combo = remaining.swap_remove(best_idx);
        let spec = SceneSpec::from_index(combo % N_SCENE_COMBOS).unwrap();
        counts[0][spec.shape as usize] += 1;
        counts[1][spec.color as usize] += 1;
        counts[2][spec.size as usize] += 1;
        counts[3][spec.position as usize] += 1;
        chosen.push(combo);
    }
    chosen
}

/// Build the manifest in memory (no files written).
pub fn plan_corpus(cfg: &CorpusConfig, seed: u64) -> Result<CorpusManifest> {
    if cfg.languages.is_empty() {
        return Err(StaError::Corpus("at least one language required".into()));
    }
    if cfg.speakers_per_caption == 0 {
        return Err(StaError::Corpus("at least one speaker required".into()));
    }
    let capacity = N_SCENE_COMBOS * cfg.repeat_factor.max(1);
    if cfg.n_scenes == 0 || cfg.n_scenes > capacity {
        return Err(StaError::Corpus(format!(
            "n_scenes {} outside [1, {}] (216 x repeat factor {})",
            cfg.n_scenes,
            capacity,
            cfg.repeat_factor.max(1)
        )));
    }
    let n_test = ((cfg.n_scenes as f64) * cfg.test_fraction).round() as usize;
    if n_test == 0 || n_test >= cfg.n_scenes {
        return Err(StaError::Corpus(format!(
            "test fraction {} yields impossible split ({} of {})",
            cfg.test_fraction, n_test, cfg.n_scenes
        )));
    }

    // instance ids 0..216*repeat; instance % 216 is the attribute combo.
    // Duplicated combos stay in one split: we select and partition by combo.
    let mut select_rng = derive_rng(seed, "corpus-select", &[]);
    let pool: Vec<usize> = (0..capacity).collect();
    let scenes = greedy_balanced(&pool, cfg.n_scenes, &mut select_rng);

    // attribute-disjoint test selection at combo granularity
    let mut combo_to_instances: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &inst in &scenes {
        combo_to_instances.entry(inst % N_SCENE_COMBOS).or_default().push(inst);
    }
    let combos: Vec<usize> = combo_to_instances.keys().cloned().collect();
    let mut split_rng = derive_rng(seed, "corpus-split", &[]);
    let mut test_combos = Vec::new();
    {
        // pick whole combos until the test quota is met
        let ordered = greedy_balanced(&combos, combos.len(), &mut split_rng);
        let mut total = 0usize;
        for combo in ordered {
            if total >= n_test {
                break;
            }
            total += combo_to_instances[&combo].len();
            test_combos.push(combo);
        }
    }
    let is_test: std::collections::BTreeSet<usize> = test_combos.into_iter().collect();

    // dev: a balanced subset of train/dev scenes contributes one speaker's
    // record each, so train and dev share scene classes (test does not).
    let trainval: Vec<usize> = {
        let mut v: Vec<usize> = scenes
            .iter()
            .cloned()
            .filter(|inst| !is_test.contains(&(inst % N_SCENE_COMBOS)))
            .collect();
        v.sort_unstable();
        v
    };
    let mut dev_rng = derive_rng(seed, "corpus-dev", &[]);
    let n_dev = (((trainval.len() * cfg.speakers_per_caption as usize) as f64
        * cfg.dev_fraction)
        .round() as usize)
        .min(trainval.len());
    let dev_speaker: BTreeMap<usize, u32> = greedy_balanced(&trainval, n_dev, &mut dev_rng)
        .into_iter()
        .enumerate()
        .map(|(i, inst)| (inst, (i as u32) % cfg.speakers_per_caption))
        .collect();

    let mut records = Vec::new();
    let mut id = 0usize;
    let mut sorted_scenes = scenes.clone();
    sorted_scenes.sort_unstable();
    for &inst in &sorted_scenes {
        let combo = inst % N_SCENE_COMBOS;
        let spec = SceneSpec::from_index(combo)?;
        let scene_is_test = is_test.contains(&combo);
        for speaker in 0..cfg.speakers_per_caption {
            let split = if scene_is_test {
                Split::Test
            } else if dev_speaker.get(&inst) == Some(&speaker) {
                Split::Dev
            } else {
                Split::Train
            };
            let mut captions = BTreeMap::new();
            for lang in &cfg.languages {
                captions.insert(
                    lang.tag().to_string(),
                    format!("captions/rec{:04}_{}_s{}.stac", inst, lang.tag(), speaker),
                );
            }
            records.push(CorpusRecord {
                id,
                image: format!("images/scene{:04}.png", inst),
                captions,
                languages: cfg.languages.clone(),
                speaker,
                scene: spec,
                split,
            });
            id += 1;
        }
    }

    Ok(CorpusManifest {
        seed,
        n_scenes: cfg.n_scenes,
        languages: cfg.languages.clone(),
        speakers_per_caption: cfg.speakers_per_caption,
        records,
    })
}

/// Generate the corpus on disk: PNGs, caption files, manifest.json.
pub fn generate_corpus(cfg: &CorpusConfig, seed: u64, dir: &Path) -> Result<CorpusManifest> {
    let manifest = plan_corpus(cfg, seed)?;
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("captions"))?;

    let mut written_images = std::collections::BTreeSet::new();
    for rec in &manifest.records {
        if written_images.insert(rec.image.clone()) {
            let image = render(&rec.scene);
            write_png(&dir.join(&rec.image), &image, IMAGE_SIZE, IMAGE_SIZE)?;
        }
        for (tag, path) in &rec.captions {
            let lang = Language::parse(tag)?;
            // caption content keyed by (seed, instance, lang, speaker)
            let inst: u64 = parse_instance_id(&rec.image)?;
            let mut rng = derive_rng(
                seed,
                "caption",
                &[inst, lang as u64, rec.speaker as u64],
            );
            let caption = synthesize_caption(&rec.scene, lang, rec.speaker, &mut rng);
            write_caption(&dir.join(path), &caption)?;
        }
    }

    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

fn parse_instance_id(image_path: &str) -> Result<u64> {
    let stem = image_path
        .trim_start_matches("images/scene")
        .trim_end_matches(".png");
    stem.parse::<u64>()
        .map_err(|_| StaError::Corpus(format!("bad image path {}", image_path)))
}

pub fn load_manifest(dir: &Path) -> Result<CorpusManifest> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

// ── file formats ────────────────────────────────────────────────────

/// 8-bit RGB PNG from [0,1] channel-last values.
pub fn write_png(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    if values.len() != width * height * 3 {
        return Err(StaError::shape(
            "write_png",
            format!("{} values for {}x{}x3", values.len(), width, height),
        ));
    }
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let file = std::fs::File::create(path)?;
    let w = std::io::BufWriter::new(file);
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| StaError::Png(e.to_string()))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| StaError::Png(e.to_string()))?;
    Ok(())
}

/// Read an RGB PNG back to [0,1] channel-last values.
pub fn read_png(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let file = std::fs::File::open(path)?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| StaError::Png(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| StaError::Png(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(StaError::Png(format!(
            "expected 8-bit RGB, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let n = info.width as usize * info.height as usize * 3;
    let values = buf[..n].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((values, info.width as usize, info.height as usize))
}

const CAPTION_MAGIC: &[u8; 4] = b"STAC";
const CAPTION_VERSION: u32 = 1;

/// Caption file: 8-byte header {magic "STAC", version u32 LE}, then
/// u32 L, u32 d_frame, then L*d_frame little-endian binary32 values.
pub fn write_caption(path: &Path, caption: &CaptionSequence) -> Result<()> {
    let mut out = Vec::with_capacity(16 + caption.frames.len() * 4);
    out.extend_from_slice(CAPTION_MAGIC);
    out.extend_from_slice(&CAPTION_VERSION.to_le_bytes());
    out.extend_from_slice(&(caption.len() as u32).to_le_bytes());
    out.extend_from_slice(&(D_FRAME as u32).to_le_bytes());
    for v in &caption.frames {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn read_caption(path: &Path) -> Result<CaptionSequence> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[0..4] != CAPTION_MAGIC {
        return Err(StaError::Corpus(format!(
            "{} is not a caption file (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CAPTION_VERSION {
        return Err(StaError::Corpus(format!(
            "unsupported caption version {}",
            version
        )));
    }
    let l = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if d != D_FRAME {
        return Err(StaError::Corpus(format!(
            "caption frame dim {} does not match pipeline dim {}",
            d, D_FRAME
        )));
    }
    let need = 16 + l * d * 4;
    if bytes.len() != need {
        return Err(StaError::Corpus(format!(
            "caption file length {} != expected {}",
            bytes.len(),
            need
        )));
    }
    let mut frames = Vec::with_capacity(l * d);
    for i in 0..l * d {
        let off = 16 + i * 4;
        frames.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    Ok(CaptionSequence { frames })
}
