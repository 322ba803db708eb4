//! `.milb` bag record files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header   magic "MILB" | version u16 | height u16 | width u16 | encoding u8 | bag count u32
//! record   id length u16 | id (UTF-8) | flags u8 | instance count u16
//!          | truth bitmap (only if flags & 0x02; ceil(count / 8) bytes, bit i = instance i, LSB first)
//!          | count * height * width samples, row-major (f32 or f16)
//! ```
//!
//! Bit 0 of `flags` is the bag label. Values are stored at the encoding's
//! width, so a round trip is exact for values representable at that width.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use half::f16;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MilError, Result};
use crate::mil::{Bag, Label};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MILB";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 15;
pub const FILE_EXTENSION: &str = "milb";

const FLAG_POSITIVE: u8 = 0x01;
const FLAG_TRUTH: u8 = 0x02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    F32 = 0,
    F16 = 1,
}

impl Encoding {
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Encoding::F32),
            1 => Some(Encoding::F16),
            _ => None,
        }
    }

    pub fn sample_bytes(self) -> usize {
        match self {
            Encoding::F32 => 4,
            Encoding::F16 => 2,
        }
    }

    /// The value actually stored for `v`.
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            Encoding::F32 => f64::from(v as f32),
            Encoding::F16 => f16::from_f64(v).to_f64(),
        }
    }
}

impl std::str::FromStr for Encoding {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "f32" | "0" => Ok(Encoding::F32),
            "f16" | "1" => Ok(Encoding::F16),
            other => Err(format!("unknown encoding `{other}` (expected f32 or f16)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u16,
    pub height: u16,
    pub width: u16,
    pub encoding: Encoding,
    pub bag_count: u32,
}

impl Header {
    fn to_bytes(self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6..8].copy_from_slice(&self.height.to_le_bytes());
        b[8..10].copy_from_slice(&self.width.to_le_bytes());
        b[10] = self.encoding.tag();
        b[11..15].copy_from_slice(&self.bag_count.to_le_bytes());
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteSummary {
    pub bytes_written: u64,
    pub bag_count: u32,
}

/// Size in bytes of one encoded record.
pub fn record_len(bag: &Bag, encoding: Encoding) -> usize {
    let count = bag.instances.len();
    let pixels: usize = bag.instances.iter().map(Tensor::len).sum();
    let bitmap = if bag.instance_truth.is_some() { count.div_ceil(8) } else { 0 };
    2 + bag.id.len() + 1 + 2 + bitmap + pixels * encoding.sample_bytes()
}

fn instance_hw(bag: &Bag) -> Result<(usize, usize)> {
    match bag.instance_shape() {
        Some(&[1, h, w]) => Ok((h, w)),
        Some(other) => Err(MilError::Shape(format!(
            "bag `{}` has instance shape {other:?}, expected (1, H, W)",
            bag.id
        ))),
        None => Err(MilError::EmptyBag(bag.id.clone())),
    }
}

fn encode_record(bag: &Bag, encoding: Encoding, hw: (usize, usize), out: &mut Vec<u8>) -> Result<()> {
    bag.validate()?;
    if instance_hw(bag)? != hw {
        return Err(MilError::Shape(format!(
            "bag `{}` has {:?} instances, file holds {}x{}",
            bag.id,
            bag.instance_shape(),
            hw.0,
            hw.1
        )));
    }
    let id_len = u16::try_from(bag.id.len())
        .map_err(|_| MilError::Config(format!("bag id of {} bytes is too long", bag.id.len())))?;
    let count = u16::try_from(bag.instances.len())
        .map_err(|_| MilError::Config(format!("bag `{}` has too many instances", bag.id)))?;
    out.extend_from_slice(&id_len.to_le_bytes());
    out.extend_from_slice(bag.id.as_bytes());
    let mut flags = 0;
    if bag.label.is_positive() {
        flags |= FLAG_POSITIVE;
    }
    if bag.instance_truth.is_some() {
        flags |= FLAG_TRUTH;
    }
    out.push(flags);
    out.extend_from_slice(&count.to_le_bytes());
    if let Some(truth) = &bag.instance_truth {
        let mut bitmap = vec![0u8; truth.len().div_ceil(8)];
        for (i, _) in truth.iter().enumerate().filter(|(_, &t)| t) {
            bitmap[i / 8] |= 1 << (i % 8);
        }
        out.extend_from_slice(&bitmap);
    }
    for inst in &bag.instances {
        for &v in inst.data() {
            match encoding {
                Encoding::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Encoding::F16 => out.extend_from_slice(&f16::from_f64(v).to_le_bytes()),
            }
        }
    }
    Ok(())
}

/// Writes `bags` to any sink. All instances must share one `(1, H, W)` shape.
pub fn write_bags_to<W: Write>(bags: &[Bag], sink: W, encoding: Encoding) -> Result<WriteSummary> {
    let hw = match bags.first() {
        Some(b) => instance_hw(b)?,
        None => (0, 0),
    };
    let dim = |v: usize| {
        u16::try_from(v).map_err(|_| MilError::Shape(format!("instance extent {v} exceeds u16")))
    };
    let bag_count =
        u32::try_from(bags.len()).map_err(|_| MilError::Config("too many bags for one file".into()))?;
    let header = Header {
        version: FORMAT_VERSION,
        height: dim(hw.0)?,
        width: dim(hw.1)?,
        encoding,
        bag_count,
    };
    let mut sink = BufWriter::new(sink);
    sink.write_all(&header.to_bytes())?;
    let mut written = HEADER_LEN as u64;
    let mut buf = Vec::new();
    for bag in bags {
        buf.clear();
        encode_record(bag, encoding, hw, &mut buf)?;
        sink.write_all(&buf)?;
        written += buf.len() as u64;
    }
    sink.flush()?;
    Ok(WriteSummary {
        bytes_written: written,
        bag_count,
    })
}

pub fn write_bags(bags: &[Bag], path: impl AsRef<Path>, encoding: Encoding) -> Result<WriteSummary> {
    let file = File::create(path.as_ref())?;
    write_bags_to(bags, file, encoding)
}

/// Streaming reader: holds at most one decoded bag at a time.
pub struct BagReader<R> {
    source: R,
    path: PathBuf,
    header: Header,
    next_index: u32,
    offset: u64,
    failed: bool,
}

/// Opens a bag file and validates its header.
pub fn read_bags(path: impl AsRef<Path>) -> Result<BagReader<BufReader<File>>> {
    let path = path.as_ref();
    let file = File::open(path)?;
    BagReader::new(BufReader::new(file), path)
}

/// Reads every bag of a file into memory.
pub fn read_all(path: impl AsRef<Path>) -> Result<Vec<Bag>> {
    read_bags(path)?.collect()
}

fn read_full<R: Read>(source: &mut R, buf: &mut [u8]) -> io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => return Ok(false),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

impl<R: Read> BagReader<R> {
    pub fn new(mut source: R, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut raw = [0u8; HEADER_LEN];
        let mut magic = [0u8; 4];
        if !read_full(&mut source, &mut magic)? {
            return Err(MilError::BadMagic { path, found: magic });
        }
        if magic != MAGIC {
            return Err(MilError::BadMagic { path, found: magic });
        }
        raw[..4].copy_from_slice(&magic);
        if !read_full(&mut source, &mut raw[4..])? {
            return Err(MilError::Truncated {
                path,
                bag_index: 0,
                offset: 4,
            });
        }
        let version = u16::from_le_bytes([raw[4], raw[5]]);
        if version != FORMAT_VERSION {
            return Err(MilError::Version {
                path,
                version,
                offset: 4,
            });
        }
        let encoding = Encoding::from_tag(raw[10]).ok_or(MilError::Encoding {
            path: path.clone(),
            tag: raw[10],
            offset: 10,
        })?;
        let header = Header {
            version,
            height: u16::from_le_bytes([raw[6], raw[7]]),
            width: u16::from_le_bytes([raw[8], raw[9]]),
            encoding,
            bag_count: u32::from_le_bytes([raw[11], raw[12], raw[13], raw[14]]),
        };
        Ok(Self {
            source,
            path,
            header,
            next_index: 0,
            offset: HEADER_LEN as u64,
            failed: false,
        })
    }

    pub fn header(&self) -> Header {
        self.header
    }

    fn take(&mut self, buf: &mut [u8]) -> Result<()> {
        if !read_full(&mut self.source, buf)? {
            return Err(MilError::Truncated {
                path: self.path.clone(),
                bag_index: self.next_index,
                offset: self.offset,
            });
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn malformed(&self, reason: impl Into<String>) -> MilError {
        MilError::Malformed {
            path: self.path.clone(),
            bag_index: self.next_index,
            offset: self.offset,
            reason: reason.into(),
        }
    }

    fn read_record(&mut self) -> Result<Bag> {
        let mut two = [0u8; 2];
        self.take(&mut two)?;
        let mut id = vec![0u8; u16::from_le_bytes(two) as usize];
        self.take(&mut id)?;
        let id = String::from_utf8(id).map_err(|_| self.malformed("bag id is not UTF-8"))?;
        let mut flags = [0u8; 1];
        self.take(&mut flags)?;
        let flags = flags[0];
        if flags & !(FLAG_POSITIVE | FLAG_TRUTH) != 0 {
            return Err(self.malformed(format!("unknown flag bits {flags:#04x}")));
        }
        let label = Label::from_bool(flags & FLAG_POSITIVE != 0);
        self.take(&mut two)?;
        let count = u16::from_le_bytes(two) as usize;
        if count == 0 {
            return Err(self.malformed("bag has no instances"));
        }
        let truth = if flags & FLAG_TRUTH != 0 {
            let mut bitmap = vec![0u8; count.div_ceil(8)];
            self.take(&mut bitmap)?;
            Some((0..count).map(|i| bitmap[i / 8] & (1 << (i % 8)) != 0).collect::<Vec<_>>())
        } else {
            None
        };
        let (h, w) = (self.header.height as usize, self.header.width as usize);
        if h == 0 || w == 0 {
            return Err(self.malformed("header declares empty instances"));
        }
        let sample = self.header.encoding.sample_bytes();
        let mut raw = vec![0u8; h * w * sample];
        let mut instances = Vec::with_capacity(count);
        for _ in 0..count {
            self.take(&mut raw)?;
            let data = match self.header.encoding {
                Encoding::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                    .collect(),
                Encoding::F16 => raw
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64())
                    .collect(),
            };
            instances.push(Tensor::new(vec![1, h, w], data)?);
        }
        Bag::new(id, label, instances, truth).map_err(|e| self.malformed(e.to_string()))
    }
}

impl<R: Read> Iterator for BagReader<R> {
    type Item = Result<Bag>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if self.next_index == self.header.bag_count {
            // header count exhausted: anything left over is an error
            let mut probe = [0u8; 1];
            return match self.source.read(&mut probe) {
                Ok(0) => None,
                Ok(_) => {
                    self.failed = true;
                    Some(Err(self.malformed("trailing bytes after the last record")))
                }
                Err(e) => {
                    self.failed = true;
                    Some(Err(e.into()))
                }
            };
        }
        let result = self.read_record();
        match result {
            Ok(_) => self.next_index += 1,
            Err(_) => self.failed = true,
        }
        Some(result)
    }
}

/// Seeded permutation of a bag's instances (truth flags move in lockstep).
pub fn shuffle_instances(bag: &Bag, seed: u64) -> Bag {
    let mut order: Vec<usize> = (0..bag.instances.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Bag {
        id: bag.id.clone(),
        label: bag.label,
        instances: order.iter().map(|&i| bag.instances[i].clone()).collect(),
        instance_truth: bag
            .instance_truth
            .as_ref()
            .map(|t| order.iter().map(|&i| t[i]).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bag(id: &str, label: Label, values: &[&[f64]], truth: Option<Vec<bool>>) -> Bag {
        let instances = values
            .iter()
            .map(|v| Tensor::new(vec![1, 2, 2], v.to_vec()).unwrap())
            .collect();
        Bag::new(id, label, instances, truth).unwrap()
    }

    #[test]
    fn single_record_layout() {
        let b = bag("a", Label::Positive, &[&[1.0, 2.0, 3.0, 4.0]], Some(vec![true]));
        assert_eq!(record_len(&b, Encoding::F32), 2 + 1 + 1 + 2 + 1 + 16);
        let mut out = Vec::new();
        let summary = write_bags_to(std::slice::from_ref(&b), &mut out, Encoding::F32).unwrap();
        assert_eq!(summary.bytes_written as usize, HEADER_LEN + 23);
        assert_eq!(out.len(), HEADER_LEN + 23);
        assert_eq!(&out[..4], b"MILB");
        assert_eq!(&out[4..15], &[1, 0, 2, 0, 2, 0, 0, 1, 0, 0, 0]);
        // id len, id, flags (positive | truth), count, bitmap, first sample
        assert_eq!(&out[15..22], &[1, 0, b'a', 0x03, 1, 0, 0x01]);
        assert_eq!(&out[22..26], &1.0f32.to_le_bytes());
    }

    #[test]
    fn empty_file_is_header_only() {
        let mut out = Vec::new();
        let s = write_bags_to(&[], &mut out, Encoding::F16).unwrap();
        assert_eq!(s.bag_count, 0);
        assert_eq!(out.len(), HEADER_LEN);
        let reader = BagReader::new(out.as_slice(), "mem").unwrap();
        assert_eq!(reader.header().bag_count, 0);
        assert_eq!(reader.count(), 0);
    }

    #[test]
    fn bad_magic_and_version_are_distinct() {
        let b = bag("x", Label::Negative, &[&[0.0; 4]], None);
        let mut out = Vec::new();
        write_bags_to(&[b], &mut out, Encoding::F32).unwrap();
        let mut wrong = out.clone();
        wrong[0] = b'X';
        assert!(matches!(BagReader::new(wrong.as_slice(), "m"), Err(MilError::BadMagic { .. })));
        let mut v2 = out.clone();
        v2[4] = 2;
        assert!(matches!(
            BagReader::new(v2.as_slice(), "m"),
            Err(MilError::Version { version: 2, offset: 4, .. })
        ));
        let mut enc = out;
        enc[10] = 7;
        assert!(matches!(BagReader::new(enc.as_slice(), "m"), Err(MilError::Encoding { tag: 7, .. })));
    }

    #[test]
    fn truncation_names_the_bag() {
        let bags = vec![
            bag("first", Label::Negative, &[&[1.0; 4]], None),
            bag("second", Label::Positive, &[&[2.0; 4], &[3.0; 4]], Some(vec![false, true])),
        ];
        let mut out = Vec::new();
        write_bags_to(&bags, &mut out, Encoding::F32).unwrap();
        out.truncate(out.len() - 5); // mid-instance of the second bag
        let results: Vec<_> = BagReader::new(out.as_slice(), "t").unwrap().collect();
        assert_eq!(results.len(), 2);
        assert_eq!(results[0].as_ref().unwrap(), &bags[0]);
        match &results[1] {
            Err(MilError::Truncated { bag_index, offset, .. }) => {
                assert_eq!(*bag_index, 1);
                assert!(*offset > HEADER_LEN as u64);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn header_count_mismatch_detected() {
        let b = bag("x", Label::Negative, &[&[0.0; 4]], None);
        let mut out = Vec::new();
        write_bags_to(&[b.clone(), b], &mut out, Encoding::F32).unwrap();
        let mut short = out.clone();
        short[11] = 1;
        let r: Vec<_> = BagReader::new(short.as_slice(), "c").unwrap().collect();
        assert!(matches!(r.last(), Some(Err(MilError::Malformed { .. }))));
        let mut long = out;
        long[11] = 3;
        let r: Vec<_> = BagReader::new(long.as_slice(), "c").unwrap().collect();
        assert!(matches!(r.last(), Some(Err(MilError::Truncated { bag_index: 2, .. }))));
    }

    #[test]
    fn f16_decoding_widens_exactly() {
        let b = bag("h", Label::Positive, &[&[0.1, 65504.0, -2.5, 1e-3]], None);
        let mut out = Vec::new();
        write_bags_to(&[b], &mut out, Encoding::F16).unwrap();
        let back: Vec<Bag> = BagReader::new(out.as_slice(), "h").unwrap().collect::<Result<_>>().unwrap();
        let got = back[0].instances[0].data();
        assert_eq!(got[1], 65504.0);
        assert_eq!(got[2], -2.5);
        assert_eq!(got[0], f16::from_f64(0.1).to_f64());
        assert_eq!(got[0], Encoding::F16.quantize(0.1));
    }

    #[test]
    fn rejects_mixed_shapes() {
        let a = bag("a", Label::Negative, &[&[0.0; 4]], None);
        let b = Bag::new("b", Label::Negative, vec![Tensor::zeros(vec![1, 3, 3])], None).unwrap();
        let mut out = Vec::new();
        assert!(matches!(write_bags_to(&[a, b], &mut out, Encoding::F32), Err(MilError::Shape(_))));
    }

    #[test]
    fn shuffle_is_seeded_permutation() {
        let values: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64; 4]).collect();
        let refs: Vec<&[f64]> = values.iter().map(Vec::as_slice).collect();
        let truth: Vec<bool> = (0..9).map(|i| i == 4).collect();
        let b = bag("s", Label::Positive, &refs, Some(truth));
        let s1 = shuffle_instances(&b, 5);
        assert_eq!(s1, shuffle_instances(&b, 5));
        assert_eq!((s1.id.as_str(), s1.label), ("s", Label::Positive));
        let mut firsts: Vec<f64> = s1.instances.iter().map(|t| t.data()[0]).collect();
        let pos = s1.instance_truth.as_ref().unwrap().iter().position(|&t| t).unwrap();
        assert_eq!(s1.instances[pos].data()[0], 4.0);
        firsts.sort_by(f64::total_cmp);
        assert_eq!(firsts, (0..9).map(f64::from).collect::<Vec<_>>());
        let one = bag("o", Label::Negative, &[&[1.0; 4]], None);
        assert_eq!(shuffle_instances(&one, 3), one);
    }
}
