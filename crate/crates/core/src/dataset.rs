//! Labeled datasets, class partitions, and seeded episode/batch sampling.
//!
//! Two on-disk corpora are supported:
//!
//! * an image directory holding `labels.csv` (header `file,class`) and
//!   binary PGM (`P5`, maxval 255) files of identical size;
//! * an `EMB1` embedding file: magic `EMB1`, little-endian `u32` count,
//!   `u32` dim, `count` little-endian `u32` class ids, then `count * dim`
//!   little-endian `f32` values in row-major order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";

/// Grayscale image with intensities in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} pixels for a {height}x{width} raster",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Argument(format!("pixel intensity {p} outside [0,1]")));
        }
        Ok(Raster {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.pixels[r * self.width + c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Raster(Raster),
    Embedding(Vec<f32>),
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::Raster(_) => PayloadKind::Raster,
            Payload::Embedding(_) => PayloadKind::Embedding,
        }
    }

    /// Flat feature view: pixels for rasters, the vector for embeddings.
    pub fn values(&self) -> &[f32] {
        match self {
            Payload::Raster(r) => r.pixels(),
            Payload::Embedding(v) => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Raster,
    Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: usize,
    pub payload: Payload,
    pub class_id: usize,
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    items: Vec<Item>,
    class_names: Vec<String>,
    payload_kind: PayloadKind,
    by_class: Vec<Vec<usize>>,
}

impl LabeledDataset {
    /// Validates and indexes a dataset. Item ids are reassigned to positions.
    pub fn new(
        payloads: Vec<(Payload, usize)>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let Some((first, _)) = payloads.first() else {
            return Err(Error::Argument("dataset has no items".into()));
        };
        let payload_kind = first.kind();
        let shape = payload_shape(first);
        let mut by_class = vec![Vec::new(); class_names.len()];
        let mut items = Vec::with_capacity(payloads.len());
        for (id, (payload, class_id)) in payloads.into_iter().enumerate() {
            if payload.kind() != payload_kind {
                return Err(Error::Shape(format!("item {id} mixes payload kinds")));
            }
            if payload_shape(&payload) != shape {
                return Err(Error::Shape(format!(
                    "item {id} has shape {:?}, expected {shape:?}",
                    payload_shape(&payload)
                )));
            }
            let Some(slot) = by_class.get_mut(class_id) else {
                return Err(Error::Argument(format!(
                    "item {id} has class id {class_id} but only {} classes are named",
                    class_names.len()
                )));
            };
            slot.push(id);
            items.push(Item {
                id,
                payload,
                class_id,
            });
        }
        if let Some(empty) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::EmptyClass {
                class: class_names[empty].clone(),
            });
        }
        Ok(LabeledDataset {
            items,
            class_names,
            payload_kind,
            by_class,
        })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, id: usize) -> &Item {
        &self.items[id]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn payload_kind(&self) -> PayloadKind {
        self.payload_kind
    }

    /// Length of the flat feature vector of every item.
    pub fn feature_dim(&self) -> usize {
        self.items[0].payload.values().len()
    }

    /// `(height, width)` for raster datasets.
    pub fn raster_shape(&self) -> Option<(usize, usize)> {
        match &self.items[0].payload {
            Payload::Raster(r) => Some((r.height(), r.width())),
            Payload::Embedding(_) => None,
        }
    }

    pub fn items_of_class(&self, class_id: usize) -> &[usize] {
        &self.by_class[class_id]
    }

    pub fn all_classes(&self) -> BTreeSet<usize> {
        (0..self.num_classes()).collect()
    }

    /// Sampling pool over every item of `classes`.
    pub fn pool(&self, classes: &BTreeSet<usize>) -> Result<ItemPool> {
        let mut by_class = BTreeMap::new();
        for &c in classes {
            let Some(items) = self.by_class.get(c) else {
                return Err(Error::Sampling(format!("class {c} is not in the dataset")));
            };
            by_class.insert(c, items.clone());
        }
        Ok(ItemPool { by_class })
    }
}

fn payload_shape(p: &Payload) -> (usize, usize) {
    match p {
        Payload::Raster(r) => (r.height(), r.width()),
        Payload::Embedding(v) => (1, v.len()),
    }
}

// ---------------------------------------------------------------------------
// Loading

/// Loads an image corpus: `labels.csv` plus PGM files relative to `root`.
pub fn load_image_dataset(root: &Path) -> Result<LabeledDataset> {
    let labels_path = root.join("labels.csv");
    let mut reader = csv::Reader::from_path(&labels_path)
        .map_err(|e| Error::format(&labels_path, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::format(&labels_path, e.to_string()))?
        .clone();
    if headers.len() != 2 || &headers[0] != "file" || &headers[1] != "class" {
        return Err(Error::format(&labels_path, "header must be `file,class`"));
    }

    let mut class_ids: HashMap<String, usize> = HashMap::new();
    let mut class_names = Vec::new();
    let mut payloads = Vec::new();
    let mut shape: Option<(usize, usize, String)> = None;
    for record in reader.records() {
        let record = record.map_err(|e| Error::format(&labels_path, e.to_string()))?;
        let (file, class) = (&record[0], &record[1]);
        let path = root.join(file);
        let bytes = fs::read(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        let raster = parse_pgm(&bytes).map_err(|m| Error::format(&path, m))?;
        match &shape {
            None => shape = Some((raster.height(), raster.width(), file.to_string())),
            Some((h, w, first)) if (*h, *w) != (raster.height(), raster.width()) => {
                return Err(Error::format(
                    &path,
                    format!(
                        "image is {}x{} but {first} is {h}x{w}",
                        raster.height(),
                        raster.width()
                    ),
                ));
            }
            Some(_) => {}
        }
        let next = class_ids.len();
        let id = *class_ids.entry(class.to_string()).or_insert_with(|| {
            class_names.push(class.to_string());
            next
        });
        payloads.push((Payload::Raster(raster), id));
    }
    if payloads.is_empty() {
        return Err(Error::format(&labels_path, "no items listed"));
    }
    LabeledDataset::new(payloads, class_names)
}

/// Parses a binary `P5` PGM with maxval 255.
pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<Raster, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // whitespace and comments between header tokens
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("expected magic P5, found {:?}", fields[0]));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| format!("invalid {what} {s:?} in PGM header"))
    };
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(format!("maxval must be 255, found {maxval}"));
    }
    if width == 0 || height == 0 {
        return Err("zero-sized image".into());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != width * height {
        return Err(format!(
            "expected {} pixel bytes, found {}",
            width * height,
            body.len()
        ));
    }
    let pixels = body.iter().map(|&b| f32::from(b) / 255.0).collect();
    Raster::new(height, width, pixels).map_err(|e| e.to_string())
}

/// Encodes a raster as a binary PGM, quantizing intensities to 0..=255.
pub fn encode_pgm(raster: &Raster) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", raster.width(), raster.height()).into_bytes();
    out.extend(
        raster
            .pixels()
            .iter()
            .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

/// Writes an image corpus (`labels.csv` + one PGM per item) under `root`.
pub fn write_image_dataset(dataset: &LabeledDataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut labels = String::from("file,class\n");
    for item in dataset.items() {
        let Payload::Raster(r) = &item.payload else {
            return Err(Error::Argument("image corpora need raster payloads".into()));
        };
        let name = format!("img_{:05}.pgm", item.id);
        let path = root.join(&name);
        fs::write(&path, encode_pgm(r)).map_err(|e| Error::io(&path, e))?;
        labels.push_str(&format!("{name},{}\n", dataset.class_names()[item.class_id]));
    }
    let path = root.join("labels.csv");
    fs::write(&path, labels).map_err(|e| Error::io(&path, e))
}

/// Loads an `EMB1` embedding file.
pub fn load_embedding_dataset(path: &Path) -> Result<LabeledDataset> {
    let bytes = fs::read(path).map_err(|e| Error::format(path, e.to_string()))?;
    decode_embeddings(&bytes).map_err(|m| Error::format(path, m))
}

pub fn decode_embeddings(bytes: &[u8]) -> std::result::Result<LabeledDataset, String> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)
        .map_err(|_| "file shorter than magic".to_string())?;
    if &magic != EMB_MAGIC {
        return Err(format!("bad magic {magic:?}, expected EMB1"));
    }
    let truncated = |_| "truncated header".to_string();
    let count = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let dim = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    if count == 0 || dim == 0 {
        return Err(format!("degenerate header count={count} dim={dim}"));
    }
    let expected = 12 + 4 * count + 4 * count * dim;
    if bytes.len() != expected {
        return Err(format!(
            "expected {expected} bytes for {count} rows of dim {dim}, found {}",
            bytes.len()
        ));
    }
    let mut labels = vec![0u32; count];
    cur.read_u32_into::<LittleEndian>(&mut labels)
        .map_err(|_| "truncated labels".to_string())?;
    let mut values = vec![0f32; count * dim];
    cur.read_f32_into::<LittleEndian>(&mut values)
        .map_err(|_| "truncated matrix".to_string())?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err("non-finite embedding value".into());
    }

    let num_classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let class_names = (0..num_classes).map(|c| c.to_string()).collect();
    let payloads = values
        .chunks_exact(dim)
        .zip(&labels)
        .map(|(row, &l)| (Payload::Embedding(row.to_vec()), l as usize))
        .collect();
    LabeledDataset::new(payloads, class_names).map_err(|e| e.to_string())
}

/// Serializes an embedding dataset to `EMB1` bytes.
pub fn encode_embeddings(dataset: &LabeledDataset) -> Result<Vec<u8>> {
    if dataset.payload_kind() != PayloadKind::Embedding {
        return Err(Error::Argument("EMB1 needs embedding payloads".into()));
    }
    let dim = dataset.feature_dim();
    let mut out = Vec::with_capacity(12 + dataset.len() * (4 + 4 * dim));
    out.write_all(EMB_MAGIC).expect("vec write");
    out.write_u32::<LittleEndian>(dataset.len() as u32).expect("vec write");
    out.write_u32::<LittleEndian>(dim as u32).expect("vec write");
    for item in dataset.items() {
        out.write_u32::<LittleEndian>(item.class_id as u32).expect("vec write");
    }
    for item in dataset.items() {
        for &v in item.payload.values() {
            out.write_f32::<LittleEndian>(v).expect("vec write");
        }
    }
    Ok(out)
}

pub fn write_embedding_dataset(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let bytes = encode_embeddings(dataset)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a directory as an image corpus and anything else as an `EMB1` file.
pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    if path.is_dir() {
        load_image_dataset(path)
    } else {
        load_embedding_dataset(path)
    }
}

// ---------------------------------------------------------------------------
// Class partitions

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub meta_train: BTreeSet<usize>,
    pub meta_valid: BTreeSet<usize>,
    pub meta_test: BTreeSet<usize>,
}

impl ClassSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (
            self.meta_train.len(),
            self.meta_valid.len(),
            self.meta_test.len(),
        )
    }
}

/// Shuffles the classes with the `"split"` stream of `seed` and assigns
/// `round(C*b/s)` to meta-valid, `round(C*c/s)` to meta-test and the rest
/// to meta-train.
pub fn split_classes(
    dataset: &LabeledDataset,
    ratios: (u32, u32, u32),
    seed: u64,
) -> Result<ClassSplit> {
    let (a, b, c) = ratios;
    for (name, r) in [("train", a), ("valid", b), ("test", c)] {
        if r == 0 {
            return Err(Error::Split(format!("{name} ratio must be positive")));
        }
    }
    let total = dataset.num_classes();
    if total < 3 {
        return Err(Error::Split(format!(
            "need at least 3 classes to split, found {total}"
        )));
    }
    let sum = f64::from(a + b + c);
    let share = |r: u32| ((total as f64 * f64::from(r) / sum).round() as usize).max(1);
    let n_valid = share(b);
    let n_test = share(c);
    if n_valid + n_test >= total {
        return Err(Error::Split(format!(
            "{total} classes leave none for meta-train at ratios {a}:{b}:{c}"
        )));
    }
    let mut classes: Vec<usize> = (0..total).collect();
    classes.shuffle(&mut rng::stream(seed, "split"));
    let (valid, rest) = classes.split_at(n_valid);
    let (test, train) = rest.split_at(n_test);
    Ok(ClassSplit {
        meta_train: train.iter().copied().collect(),
        meta_valid: valid.iter().copied().collect(),
        meta_test: test.iter().copied().collect(),
    })
}

// ---------------------------------------------------------------------------
// Sampling

/// Items available for sampling, grouped by global class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemPool {
    by_class: BTreeMap<usize, Vec<usize>>,
}

impl ItemPool {
    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_class.keys().copied()
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn items_of(&self, class: usize) -> &[usize] {
        self.by_class.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn item_ids(&self) -> BTreeSet<usize> {
        self.by_class.values().flatten().copied().collect()
    }

    fn draw_classes<R: Rng + ?Sized>(&self, way: usize, rng: &mut R) -> Result<Vec<usize>> {
        if way == 0 {
            return Err(Error::Sampling("way must be positive".into()));
        }
        if self.by_class.len() < way {
            return Err(Error::Sampling(format!(
                "need {way} classes, pool has {} (short by {})",
                self.by_class.len(),
                way - self.by_class.len()
            )));
        }
        let keys: Vec<usize> = self.by_class.keys().copied().collect();
        Ok(index::sample(rng, keys.len(), way)
            .into_iter()
            .map(|i| keys[i])
            .collect())
    }

    fn draw_items<R: Rng + ?Sized>(&self, class: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        let items = self.items_of(class);
        if items.len() < n {
            return Err(Error::Sampling(format!(
                "class {class} has {} items, need {n} (short by {})",
                items.len(),
                n - items.len()
            )));
        }
        Ok(index::sample(rng, items.len(), n)
            .into_iter()
            .map(|i| items[i])
            .collect())
    }

    /// Draws a `way`-way `shot`-shot episode with `query` queries per class.
    pub fn sample_episode<R: Rng + ?Sized>(
        &self,
        way: usize,
        shot: usize,
        query: usize,
        rng: &mut R,
    ) -> Result<Episode> {
        if shot == 0 {
            return Err(Error::Sampling("shot must be positive".into()));
        }
        let classes = self.draw_classes(way, rng)?;
        let mut support = Vec::with_capacity(way * shot);
        let mut queries = Vec::with_capacity(way * query);
        for (label, &class) in classes.iter().enumerate() {
            let drawn = self.draw_items(class, shot + query, rng)?;
            let (s, q) = drawn.split_at(shot);
            support.extend(s.iter().map(|&item_id| EpisodeItem { item_id, label }));
            queries.extend(q.iter().map(|&item_id| EpisodeItem { item_id, label }));
        }
        Ok(Episode {
            way,
            shot,
            query_per_class: query,
            classes,
            support,
            query: queries,
        })
    }

    /// Draws a class-balanced `way`-way `shot`-shot training batch.
    pub fn sample_batch<R: Rng + ?Sized>(&self, way: usize, shot: usize, rng: &mut R) -> Result<Batch> {
        if shot == 0 {
            return Err(Error::Sampling("batch shot must be positive".into()));
        }
        let classes = self.draw_classes(way, rng)?;
        let mut items = Vec::with_capacity(way * shot);
        for class in classes {
            items.extend(
                self.draw_items(class, shot, rng)?
                    .into_iter()
                    .map(|item_id| (item_id, class)),
            );
        }
        Ok(Batch { way, shot, items })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeItem {
    pub item_id: usize,
    /// Local class index in `0..way`.
    pub label: usize,
}

/// One few-shot task. Support and query lists are class-major; local labels
/// follow the order in which classes were drawn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    /// Global class id of each local label.
    pub classes: Vec<usize>,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|i| i.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|i| i.label).collect()
    }

    pub fn support_payloads<'a>(&self, dataset: &'a LabeledDataset) -> Vec<&'a Payload> {
        self.support.iter().map(|i| &dataset.item(i.item_id).payload).collect()
    }

    pub fn query_payloads<'a>(&self, dataset: &'a LabeledDataset) -> Vec<&'a Payload> {
        self.query.iter().map(|i| &dataset.item(i.item_id).payload).collect()
    }
}

/// Class-balanced training batch of `(item_id, global class id)` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub way: usize,
    pub shot: usize,
    pub items: Vec<(usize, usize)>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.items.len()
    }
}

pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    classes: &BTreeSet<usize>,
    way: usize,
    shot: usize,
    query: usize,
    rng: &mut R,
) -> Result<Episode> {
    dataset.pool(classes)?.sample_episode(way, shot, query, rng)
}

pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    classes: &BTreeSet<usize>,
    way: usize,
    shot: usize,
    rng: &mut R,
) -> Result<Batch> {
    dataset.pool(classes)?.sample_batch(way, shot, rng)
}

/// Stratified item split of the meta-valid classes for ensemble training.
/// Each class keeps `ceil(n * fraction)` items (clamped to `1..n`) on the
/// training side; both halves cover the same classes.
pub fn split_for_ensemble<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    valid_classes: &BTreeSet<usize>,
    fraction: f64,
    rng: &mut R,
) -> Result<(ItemPool, ItemPool)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Split(format!("fraction {fraction} outside (0,1)")));
    }
    let mut train = BTreeMap::new();
    let mut test = BTreeMap::new();
    for &class in valid_classes {
        if class >= dataset.num_classes() {
            return Err(Error::Split(format!("class {class} is not in the dataset")));
        }
        let mut items = dataset.items_of_class(class).to_vec();
        let n = items.len();
        if n < 2 {
            return Err(Error::Split(format!(
                "class {} has {n} item(s), need at least 2",
                dataset.class_names()[class]
            )));
        }
        items.shuffle(rng);
        let n_train = ((n as f64 * fraction).ceil() as usize).clamp(1, n - 1);
        let te = items.split_off(n_train);
        train.insert(class, items);
        test.insert(class, te);
    }
    Ok((ItemPool { by_class: train }, ItemPool { by_class: test }))
}
