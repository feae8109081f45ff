//! Minimal DICOM Part-10 reader for sorting files into series.
//!
//! Only little-endian transfer syntaxes are supported, and only string
//! valued elements are decoded. Parsing stops at pixel data or once the
//! last tag needed for series sorting has been passed.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag(pub u16, pub u16);

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:04X},{:04X})", self.0, self.1)
    }
}

pub mod tags {
    use super::Tag;

    pub const TRANSFER_SYNTAX_UID: Tag = Tag(0x0002, 0x0010);
    pub const SOP_INSTANCE_UID: Tag = Tag(0x0008, 0x0018);
    pub const MODALITY: Tag = Tag(0x0008, 0x0060);
    pub const STUDY_INSTANCE_UID: Tag = Tag(0x0020, 0x000D);
    pub const SERIES_INSTANCE_UID: Tag = Tag(0x0020, 0x000E);
    pub const INSTANCE_NUMBER: Tag = Tag(0x0020, 0x0013);
    pub const PIXEL_DATA: Tag = Tag(0x7FE0, 0x0010);

    pub(super) const ITEM: Tag = Tag(0xFFFE, 0xE000);
    pub(super) const ITEM_DELIMITATION: Tag = Tag(0xFFFE, 0xE00D);
    pub(super) const SEQUENCE_DELIMITATION: Tag = Tag(0xFFFE, 0xE0DD);
}

/// Tags needed to group files into series.
pub const SORTING_TAGS: [Tag; 5] = [
    tags::SOP_INSTANCE_UID,
    tags::MODALITY,
    tags::STUDY_INSTANCE_UID,
    tags::SERIES_INSTANCE_UID,
    tags::INSTANCE_NUMBER,
];

const LAST_SORTING_TAG: Tag = tags::INSTANCE_NUMBER;

pub const IMPLICIT_VR_LE: &str = "1.2.840.10008.1.2";
pub const EXPLICIT_VR_LE: &str = "1.2.840.10008.1.2.1";
const DEFLATED_EXPLICIT_VR_LE: &str = "1.2.840.10008.1.2.1.99";
const EXPLICIT_VR_BE: &str = "1.2.840.10008.1.2.2";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TransferSyntaxClass {
    ExplicitLe,
    ImplicitLe,
}

#[derive(Debug, Error)]
pub enum DicomError {
    #[error("not a DICOM file: {0}")]
    NotDicom(String),
    #[error("truncated element at offset {offset}: needs {needed} bytes, file has {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("unsupported transfer syntax {0}")]
    UnsupportedTransferSyntax(String),
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, DicomError>;

/// Decoded string values keyed by tag.
#[derive(Debug, Clone, PartialEq)]
pub struct DicomTagMap {
    pub transfer_syntax: TransferSyntaxClass,
    values: BTreeMap<Tag, String>,
}

impl DicomTagMap {
    pub fn get(&self, tag: Tag) -> Option<&str> {
        self.values.get(&tag).map(String::as_str)
    }

    pub fn contains(&self, tag: Tag) -> bool {
        self.values.contains_key(&tag)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Tag, &String)> {
        self.values.iter()
    }

    pub fn series_uid(&self) -> Option<&str> {
        self.get(tags::SERIES_INSTANCE_UID).filter(|s| !s.is_empty())
    }

    pub fn instance_number(&self) -> Option<i64> {
        self.get(tags::INSTANCE_NUMBER)?.trim().parse().ok()
    }
}

const STRING_VRS: [&[u8; 2]; 8] = [b"UI", b"CS", b"IS", b"LO", b"SH", b"DA", b"TM", b"PN"];

const KNOWN_VRS: [&[u8; 2]; 34] = [
    b"AE", b"AS", b"AT", b"CS", b"DA", b"DS", b"DT", b"FD", b"FL", b"IS", b"LO", b"LT", b"OB", b"OD",
    b"OF", b"OL", b"OV", b"OW", b"PN", b"SH", b"SL", b"SQ", b"SS", b"ST", b"SV", b"TM", b"UC", b"UI",
    b"UL", b"UN", b"UR", b"US", b"UT", b"UV",
];

/// VRs whose explicit header carries two reserved bytes and a 32-bit length.
const LONG_VRS: [&[u8; 2]; 13] = [
    b"OB", b"OD", b"OF", b"OL", b"OV", b"OW", b"SQ", b"UC", b"UN", b"UR", b"UT", b"SV", b"UV",
];

fn is_known_vr(vr: [u8; 2]) -> bool {
    KNOWN_VRS.iter().any(|v| **v == vr)
}

/// VRs for implicit-VR files, which carry no VR on the wire.
fn implicit_vr(tag: Tag) -> Option<[u8; 2]> {
    let vr = match tag {
        tags::TRANSFER_SYNTAX_UID | tags::SOP_INSTANCE_UID => b"UI",
        tags::STUDY_INSTANCE_UID | tags::SERIES_INSTANCE_UID => b"UI",
        Tag(0x0008, 0x0016) => b"UI",
        tags::MODALITY => b"CS",
        tags::INSTANCE_NUMBER | Tag(0x0020, 0x0011) => b"IS",
        Tag(0x0008, 0x0020) => b"DA",
        Tag(0x0008, 0x0030) => b"TM",
        Tag(0x0008, 0x103E) | Tag(0x0010, 0x0020) => b"LO",
        Tag(0x0010, 0x0010) => b"PN",
        _ => return None,
    };
    Some(*vr)
}

struct Header {
    tag: Tag,
    vr: Option<[u8; 2]>,
    /// `None` is the undefined length 0xFFFFFFFF.
    len: Option<usize>,
    value_start: usize,
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn need(&self, offset: usize, n: usize) -> Result<&'a [u8]> {
        match offset.checked_add(n) {
            Some(end) if end <= self.bytes.len() => Ok(&self.bytes[offset..end]),
            _ => Err(DicomError::Truncated {
                offset,
                needed: n,
                available: self.bytes.len().saturating_sub(offset),
            }),
        }
    }

    fn u16(&self, offset: usize) -> Result<u16> {
        let b = self.need(offset, 2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&self, offset: usize) -> Result<u32> {
        let b = self.need(offset, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn header(&self, pos: usize, syntax: TransferSyntaxClass) -> Result<Option<Header>> {
        if pos >= self.bytes.len() {
            return Ok(None);
        }
        let tag = Tag(self.u16(pos)?, self.u16(pos + 2)?);
        let decode_len = |raw: u32| (raw != u32::MAX).then_some(raw as usize);
        if tag.0 == 0xFFFE || syntax == TransferSyntaxClass::ImplicitLe {
            let len = decode_len(self.u32(pos + 4)?);
            let vr = if tag.0 == 0xFFFE { None } else { implicit_vr(tag) };
            return Ok(Some(Header {
                tag,
                vr,
                len,
                value_start: pos + 8,
            }));
        }
        let raw = self.need(pos + 4, 2)?;
        let vr = [raw[0], raw[1]];
        if !is_known_vr(vr) {
            return Err(DicomError::NotDicom(format!(
                "invalid VR {:?} for {tag} at offset {pos}",
                String::from_utf8_lossy(&vr)
            )));
        }
        if LONG_VRS.iter().any(|v| **v == vr) {
            let len = decode_len(self.u32(pos + 8)?);
            Ok(Some(Header {
                tag,
                vr: Some(vr),
                len,
                value_start: pos + 12,
            }))
        } else {
            let len = self.u16(pos + 6)? as usize;
            Ok(Some(Header {
                tag,
                vr: Some(vr),
                len: Some(len),
                value_start: pos + 8,
            }))
        }
    }

    /// Skips a defined-length value, returning the offset after it.
    fn skip_value(&self, h: &Header, len: usize) -> Result<usize> {
        self.need(h.value_start, len)?;
        Ok(h.value_start + len)
    }

    /// Skips an undefined-length sequence starting at `pos` (just after its
    /// header). Returns the offset after the sequence delimitation item.
    fn skip_sequence(&self, mut pos: usize, syntax: TransferSyntaxClass) -> Result<usize> {
        enum Open {
            Sequence,
            Item,
        }
        let mut stack = vec![Open::Sequence];
        while let Some(top) = stack.last() {
            let h = self.header(pos, syntax)?.ok_or(DicomError::Truncated {
                offset: pos,
                needed: 8,
                available: 0,
            })?;
            match (top, h.tag) {
                (Open::Sequence, tags::ITEM) => match h.len {
                    Some(len) => pos = self.skip_value(&h, len)?,
                    None => {
                        stack.push(Open::Item);
                        pos = h.value_start;
                    }
                },
                (Open::Sequence, tags::SEQUENCE_DELIMITATION) => {
                    stack.pop();
                    pos = h.value_start;
                }
                (Open::Sequence, other) => {
                    return Err(DicomError::NotDicom(format!(
                        "unexpected {other} inside sequence at offset {pos}"
                    )))
                }
                (Open::Item, tags::ITEM_DELIMITATION) => {
                    stack.pop();
                    pos = h.value_start;
                }
                (Open::Item, _) => match h.len {
                    Some(len) => pos = self.skip_value(&h, len)?,
                    None if may_be_undefined(&h, syntax) => {
                        stack.push(Open::Sequence);
                        pos = h.value_start;
                    }
                    None => return Err(undefined_length(&h, pos)),
                },
            }
        }
        Ok(pos)
    }
}

fn may_be_undefined(h: &Header, syntax: TransferSyntaxClass) -> bool {
    match syntax {
        TransferSyntaxClass::ImplicitLe => true,
        TransferSyntaxClass::ExplicitLe => matches!(h.vr, Some(vr) if &vr == b"SQ" || &vr == b"UN"),
    }
}

fn undefined_length(h: &Header, pos: usize) -> DicomError {
    log::debug!("undefined length on non-sequence element {} at offset {pos}", h.tag);
    DicomError::Truncated {
        offset: pos,
        needed: u32::MAX as usize,
        available: 0,
    }
}

fn decode_string(raw: &[u8]) -> String {
    String::from_utf8_lossy(raw)
        .trim_matches(|c| c == '\0' || c == ' ')
        .to_string()
}

fn classify_transfer_syntax(uid: &str) -> Result<TransferSyntaxClass> {
    match uid {
        IMPLICIT_VR_LE => Ok(TransferSyntaxClass::ImplicitLe),
        EXPLICIT_VR_BE | DEFLATED_EXPLICIT_VR_LE => {
            Err(DicomError::UnsupportedTransferSyntax(uid.to_string()))
        }
        // Every other standard syntax (compressed pixel data included)
        // encodes the data set as explicit VR little endian.
        _ => Ok(TransferSyntaxClass::ExplicitLe),
    }
}

/// Guesses the syntax of a data set without a meta header from its first element.
fn sniff_syntax(bytes: &[u8], pos: usize) -> Result<TransferSyntaxClass> {
    let not_dicom = || DicomError::NotDicom("no DICM magic and no plausible first element".into());
    if bytes.len() < pos + 8 {
        return Err(not_dicom());
    }
    let group = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]);
    if group % 2 != 0 || !(0x0002..=0x0028).contains(&group) {
        return Err(not_dicom());
    }
    if is_known_vr([bytes[pos + 4], bytes[pos + 5]]) {
        return Ok(TransferSyntaxClass::ExplicitLe);
    }
    let len = u32::from_le_bytes([bytes[pos + 4], bytes[pos + 5], bytes[pos + 6], bytes[pos + 7]]);
    if len != u32::MAX && len as usize > bytes.len() - pos - 8 {
        return Err(not_dicom());
    }
    Ok(TransferSyntaxClass::ImplicitLe)
}

/// Parses the sorting-relevant string elements of a DICOM byte stream.
pub fn parse_dicom_tags(bytes: &[u8]) -> Result<DicomTagMap> {
    let reader = Reader { bytes };
    let mut values = BTreeMap::new();
    let mut pos = 0;
    let syntax;
    if bytes.len() >= 132 && &bytes[128..132] == b"DICM" {
        pos = 132;
        // File meta information is always explicit VR little endian.
        while pos + 2 <= bytes.len() && reader.u16(pos)? == 0x0002 {
            let h = reader
                .header(pos, TransferSyntaxClass::ExplicitLe)?
                .expect("pos is in bounds");
            let len = h.len.ok_or_else(|| undefined_length(&h, pos))?;
            let raw = reader.need(h.value_start, len)?;
            if h.vr.is_some_and(|vr| STRING_VRS.iter().any(|v| **v == vr)) {
                values.insert(h.tag, decode_string(raw));
            }
            pos = h.value_start + len;
        }
        syntax = match values.get(&tags::TRANSFER_SYNTAX_UID) {
            Some(uid) => classify_transfer_syntax(uid)?,
            None if pos >= bytes.len() => TransferSyntaxClass::ExplicitLe,
            None => sniff_syntax(bytes, pos)?,
        };
    } else {
        syntax = sniff_syntax(bytes, 0)?;
    }

    while let Some(h) = reader.header(pos, syntax)? {
        if h.tag == tags::PIXEL_DATA || (h.tag.0 != 0x0002 && h.tag > LAST_SORTING_TAG) {
            break;
        }
        let len = match h.len {
            Some(len) => len,
            None if may_be_undefined(&h, syntax) => {
                pos = reader.skip_sequence(h.value_start, syntax)?;
                continue;
            }
            None => return Err(undefined_length(&h, pos)),
        };
        let raw = reader.need(h.value_start, len)?;
        if h.vr.is_some_and(|vr| STRING_VRS.iter().any(|v| **v == vr)) {
            values.insert(h.tag, decode_string(raw));
        }
        pos = h.value_start + len;
    }
    Ok(DicomTagMap {
        transfer_syntax: syntax,
        values,
    })
}

pub fn read_dicom_tags(path: &Path) -> Result<DicomTagMap> {
    let bytes = std::fs::read(path).map_err(|source| DicomError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dicom_tags(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesFile {
    pub path: PathBuf,
    pub instance_number: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesGroup {
    pub series_uid: String,
    pub study_uid: String,
    pub modality: String,
    pub files: Vec<SeriesFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkipRecord {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SeriesSorting {
    pub groups: Vec<SeriesGroup>,
    pub skipped: Vec<SkipRecord>,
}

fn file_name(p: &Path) -> &std::ffi::OsStr {
    p.file_name().unwrap_or(p.as_os_str())
}

/// Groups files by SeriesInstanceUID. Groups keep first-seen order; files
/// within a group sort by InstanceNumber, then file name, with missing
/// InstanceNumbers last.
pub fn group_series<P: AsRef<Path>>(files: &[P]) -> SeriesSorting {
    let mut out = SeriesSorting::default();
    let mut by_uid: HashMap<String, usize> = HashMap::new();
    for path in files {
        let path = path.as_ref();
        let map = match read_dicom_tags(path) {
            Ok(map) => map,
            Err(e) => {
                out.skipped.push(SkipRecord {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let Some(uid) = map.series_uid() else {
            out.skipped.push(SkipRecord {
                path: path.to_path_buf(),
                reason: "missing SeriesInstanceUID".into(),
            });
            continue;
        };
        let idx = *by_uid.entry(uid.to_string()).or_insert_with(|| {
            out.groups.push(SeriesGroup {
                series_uid: uid.to_string(),
                study_uid: map.get(tags::STUDY_INSTANCE_UID).unwrap_or_default().to_string(),
                modality: map.get(tags::MODALITY).unwrap_or_default().to_string(),
                files: Vec::new(),
            });
            out.groups.len() - 1
        });
        out.groups[idx].files.push(SeriesFile {
            path: path.to_path_buf(),
            instance_number: map.instance_number(),
        });
    }
    for g in &mut out.groups {
        g.files.sort_by(|a, b| {
            let key = |f: &SeriesFile| (f.instance_number.is_none(), f.instance_number);
            key(a)
                .cmp(&key(b))
                .then_with(|| file_name(&a.path).cmp(file_name(&b.path)))
                .then_with(|| a.path.cmp(&b.path))
        });
    }
    out
}

/// Encoder for small Part-10 files (explicit or implicit VR little endian).
/// Used to build fixtures and synthetic inputs.
#[derive(Debug, Clone)]
pub struct Part10Writer {
    syntax: TransferSyntaxClass,
    elements: BTreeMap<Tag, ([u8; 2], Vec<u8>)>,
}

impl Part10Writer {
    pub fn new(syntax: TransferSyntaxClass) -> Self {
        Part10Writer {
            syntax,
            elements: BTreeMap::new(),
        }
    }

    /// Adds a string element, padded to even length (NUL for UI, space otherwise).
    pub fn string(mut self, tag: Tag, vr: &str, value: &str) -> Self {
        let vr: [u8; 2] = vr.as_bytes().try_into().expect("VR is two characters");
        let mut raw = value.as_bytes().to_vec();
        if raw.len() % 2 == 1 {
            raw.push(if &vr == b"UI" { 0 } else { b' ' });
        }
        self.elements.insert(tag, (vr, raw));
        self
    }

    pub fn bytes(mut self, tag: Tag, vr: &str, value: &[u8]) -> Self {
        let vr: [u8; 2] = vr.as_bytes().try_into().expect("VR is two characters");
        self.elements.insert(tag, (vr, value.to_vec()));
        self
    }

    fn push_element(out: &mut Vec<u8>, syntax: TransferSyntaxClass, tag: Tag, vr: [u8; 2], value: &[u8]) {
        out.extend_from_slice(&tag.0.to_le_bytes());
        out.extend_from_slice(&tag.1.to_le_bytes());
        match syntax {
            TransferSyntaxClass::ImplicitLe => {
                out.extend_from_slice(&(value.len() as u32).to_le_bytes());
            }
            TransferSyntaxClass::ExplicitLe => {
                out.extend_from_slice(&vr);
                if LONG_VRS.iter().any(|v| **v == vr) {
                    out.extend_from_slice(&[0, 0]);
                    out.extend_from_slice(&(value.len() as u32).to_le_bytes());
                } else {
                    out.extend_from_slice(&(value.len() as u16).to_le_bytes());
                }
            }
        }
        out.extend_from_slice(value);
    }

    /// Encodes preamble, meta header and data set.
    pub fn encode(&self) -> Vec<u8> {
        let ts = match self.syntax {
            TransferSyntaxClass::ExplicitLe => EXPLICIT_VR_LE,
            TransferSyntaxClass::ImplicitLe => IMPLICIT_VR_LE,
        };
        let sop = self
            .elements
            .get(&tags::SOP_INSTANCE_UID)
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| b"1.2.3.4\0".to_vec());
        let pad_uid = |s: &str| {
            let mut v = s.as_bytes().to_vec();
            if v.len() % 2 == 1 {
                v.push(0);
            }
            v
        };
        let mut meta = Vec::new();
        let ex = TransferSyntaxClass::ExplicitLe;
        Self::push_element(&mut meta, ex, Tag(0x0002, 0x0001), *b"OB", &[0, 1]);
        Self::push_element(&mut meta, ex, Tag(0x0002, 0x0002), *b"UI", &pad_uid("1.2.840.10008.5.1.4.1.1.2"));
        Self::push_element(&mut meta, ex, Tag(0x0002, 0x0003), *b"UI", &sop);
        Self::push_element(&mut meta, ex, tags::TRANSFER_SYNTAX_UID, *b"UI", &pad_uid(ts));

        let mut out = vec![0u8; 128];
        out.extend_from_slice(b"DICM");
        Self::push_element(&mut out, ex, Tag(0x0002, 0x0000), *b"UL", &(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for (tag, (vr, value)) in &self.elements {
            Self::push_element(&mut out, self.syntax, *tag, *vr, value);
        }
        out
    }
}
