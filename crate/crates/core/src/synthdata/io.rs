//! Dataset persistence.
//!
//! Binary container: header {magic "OCRB", version u16, scene count u32,
//! seed u64}, then one record per scene with fields in declared order,
//! little-endian f64, flags as single bytes. A JSON export mirrors the same
//! fields for debugging.

use super::Scene;
use crate::error::{Error, Result};
use crate::{NUM_HANDS, NUM_JOINTS};
use std::fs;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"OCRB";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u16,
    pub count: u32,
    pub seed: u64,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn flag(&mut self, v: bool) {
        self.buf.push(v as u8);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    record: usize,
}

impl<'a> Reader<'a> {
    fn need(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse(format!(
                "truncated dataset at record {} (offset {})",
                self.record, self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.need(8)?.try_into().unwrap()))
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.need(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.need(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.need(8)?.try_into().unwrap()))
    }
    fn flag(&mut self) -> Result<bool> {
        let b = self.need(1)?[0];
        match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(Error::Parse(format!(
                "record {}: invalid flag byte {b}",
                self.record
            ))),
        }
    }
}

fn write_record(w: &mut Writer, s: &Scene) {
    for hand in &s.joints3d {
        for j in hand {
            for v in j {
                w.f64(*v);
            }
        }
    }
    for p in &s.hand_present {
        w.flag(*p);
    }
    for c in &s.corners {
        for v in c {
            w.f64(*v);
        }
    }
    for row in &s.object_rot {
        for v in row {
            w.f64(*v);
        }
    }
    for v in &s.object_trans {
        w.f64(*v);
    }
    for row in &s.intrinsics {
        for v in row {
            w.f64(*v);
        }
    }
    for hand in &s.joints2d {
        for j in hand {
            for v in j {
                w.f64(*v);
            }
        }
    }
    for hand in &s.visibility {
        for v in hand {
            w.flag(*v);
        }
    }
    w.f64(s.occlusion_ratio);
    w.buf.extend_from_slice(&s.seed.to_le_bytes());
}

fn read_record(r: &mut Reader) -> Result<Scene> {
    let mut s = Scene {
        joints3d: [[[0.0; 3]; NUM_JOINTS]; NUM_HANDS],
        hand_present: [false; NUM_HANDS],
        corners: [[0.0; 3]; 8],
        object_rot: [[0.0; 3]; 3],
        object_trans: [0.0; 3],
        intrinsics: [[0.0; 3]; 3],
        joints2d: [[[0.0; 2]; NUM_JOINTS]; NUM_HANDS],
        visibility: [[false; NUM_JOINTS]; NUM_HANDS],
        occlusion_ratio: 0.0,
        seed: 0,
    };
    for hand in &mut s.joints3d {
        for j in hand.iter_mut() {
            for v in j.iter_mut() {
                *v = r.f64()?;
            }
        }
    }
    for p in &mut s.hand_present {
        *p = r.flag()?;
    }
    for c in &mut s.corners {
        for v in c.iter_mut() {
            *v = r.f64()?;
        }
    }
    for row in &mut s.object_rot {
        for v in row.iter_mut() {
            *v = r.f64()?;
        }
    }
    for v in &mut s.object_trans {
        *v = r.f64()?;
    }
    for row in &mut s.intrinsics {
        for v in row.iter_mut() {
            *v = r.f64()?;
        }
    }
    for hand in &mut s.joints2d {
        for j in hand.iter_mut() {
            for v in j.iter_mut() {
                *v = r.f64()?;
            }
        }
    }
    for hand in &mut s.visibility {
        for v in hand.iter_mut() {
            *v = r.flag()?;
        }
    }
    s.occlusion_ratio = r.f64()?;
    s.seed = r.u64()?;
    Ok(s)
}

pub fn write_dataset(path: &Path, scenes: &[Scene], seed: u64) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(&MAGIC);
    w.buf.extend_from_slice(&VERSION.to_le_bytes());
    w.buf.extend_from_slice(&(scenes.len() as u32).to_le_bytes());
    w.buf.extend_from_slice(&seed.to_le_bytes());
    for s in scenes {
        write_record(&mut w, s);
    }
    fs::write(path, &w.buf)?;
    Ok(())
}

/// Read the whole file; either every record parses or an error names the
/// failing record and nothing is returned.
pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Scene>)> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0, record: 0 };
    let magic = r.need(4)?;
    if magic != MAGIC {
        return Err(Error::Parse(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported dataset version {version}")));
    }
    let count = r.u32()?;
    let seed = r.u64()?;
    let mut scenes = Vec::with_capacity(count as usize);
    for i in 0..count {
        r.record = i as usize;
        scenes.push(read_record(&mut r)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Parse(format!(
            "{} trailing bytes after record {}",
            buf.len() - r.pos,
            count
        )));
    }
    Ok((DatasetHeader { version, count, seed }, scenes))
}

/// Debug mirror of the binary format.
pub fn write_dataset_json(path: &Path, scenes: &[Scene], seed: u64) -> Result<()> {
    #[derive(serde::Serialize)]
    struct JsonDataset<'a> {
        version: u16,
        seed: u64,
        scenes: &'a [Scene],
    }
    let doc = JsonDataset { version: VERSION, seed, scenes };
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Parse(format!("json encode: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, SceneConfig};

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.bin");
        let scenes: Vec<Scene> =
            (0..5).map(|i| generate_scene(i, &SceneConfig::default())).collect();
        write_dataset(&path, &scenes, 77).unwrap();
        let (hdr, back) = read_dataset(&path).unwrap();
        assert_eq!(hdr, DatasetHeader { version: VERSION, count: 5, seed: 77 });
        assert_eq!(scenes, back);
    }

    #[test]
    fn truncated_file_reports_record_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.bin");
        let scenes: Vec<Scene> =
            (0..3).map(|i| generate_scene(i, &SceneConfig::default())).collect();
        write_dataset(&path, &scenes, 1).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 100);
        std::fs::write(&path, &bytes).unwrap();
        let err = read_dataset(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("record 2"), "got: {msg}");
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        write_dataset(&path, &[], 9).unwrap();
        let (hdr, scenes) = read_dataset(&path).unwrap();
        assert_eq!(hdr.count, 0);
        assert!(scenes.is_empty());
    }

    #[test]
    fn thousand_scene_file_reads_quickly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.bin");
        let gen_start = std::time::Instant::now();
        let scenes: Vec<Scene> =
            (0..1000).map(|i| generate_scene(i, &SceneConfig::default())).collect();
        let gen_elapsed = gen_start.elapsed();
        // generation throughput floor: 100 scenes/s
        assert!(
            gen_elapsed.as_secs_f64() < 10.0,
            "generated 1000 scenes in {gen_elapsed:?}"
        );
        write_dataset(&path, &scenes, 4).unwrap();
        let start = std::time::Instant::now();
        let (_, back) = read_dataset(&path).unwrap();
        assert_eq!(back.len(), 1000);
        assert!(start.elapsed().as_secs_f64() < 1.0, "read took {:?}", start.elapsed());
    }

    #[test]
    fn json_export_mirrors_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.json");
        let scenes: Vec<Scene> = (0..2).map(|i| generate_scene(i, &SceneConfig::default())).collect();
        write_dataset_json(&path, &scenes, 5).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(doc["seed"], 5);
        assert_eq!(doc["scenes"].as_array().unwrap().len(), 2);
        assert!(doc["scenes"][0]["joints3d"].is_array());
        assert!(doc["scenes"][0]["occlusion_ratio"].is_number());
    }
}
