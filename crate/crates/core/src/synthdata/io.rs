//! Datasets in the container format.
//!
//! `kind=dataset`; `meta.count`; per sequence `i`: `meta.seq.<i>.id`,
//! `meta.seq.<i>.domain`, `meta.seq.<i>.target` (`class:safe`,
//! `class:collision` or `steer:<degrees>`) and blob `frames/<i>` (`f32`,
//! `[T, C, H, W]`). Attached maps use `meta.maps.<id>.model`,
//! `meta.maps.<id>.config` and blobs `maps/<id>/{saliency,gradient,edges}`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{DataError, Dataset};
use crate::container::Container;
use crate::network::{Frames, ImageSequence, Label, Target};
use crate::salient::{MapProvenance, SalientMaps};

pub const DATASET_KIND: &str = "dataset";

fn encode_target(t: &Target) -> String {
    match t {
        Target::Class(l) => format!("class:{}", l.as_str()),
        Target::Steering(a) => format!("steer:{a:?}"),
    }
}

fn decode_target(s: &str) -> Result<Target, DataError> {
    match s.split_once(':') {
        Some(("class", "safe")) => Ok(Target::Class(Label::Safe)),
        Some(("class", "collision")) => Ok(Target::Class(Label::Collision)),
        Some(("steer", a)) => a
            .parse()
            .map(Target::Steering)
            .map_err(|_| DataError::Malformed(format!("bad steering angle {a:?}"))),
        _ => Err(DataError::Malformed(format!("bad target {s:?}"))),
    }
}

fn push_frames(c: &mut Container, name: &str, f: &Frames) {
    c.push_f32(name, &f.shape(), f.data.clone());
}

fn read_frames(c: &Container, name: &str) -> Result<Frames, DataError> {
    let b = c.blob(name)?;
    let [t, ch, h, w] = b.shape[..] else {
        return Err(DataError::Malformed(format!("{name} is not rank 4")));
    };
    Ok(Frames::new(t, ch, h, w, b.data.to_f32())?)
}

pub fn dataset_to_container(ds: &Dataset) -> Result<Container, DataError> {
    ds.validate()?;
    let mut c = Container::new(DATASET_KIND);
    c.set("count", ds.len());
    for (i, s) in ds.sequences.iter().enumerate() {
        c.set(&format!("seq.{i}.id"), &s.id);
        c.set(&format!("seq.{i}.domain"), &s.domain_id);
        c.set(&format!("seq.{i}.target"), encode_target(&s.target));
        push_frames(&mut c, &format!("frames/{i}"), &s.frames);
    }
    for (id, m) in &ds.maps {
        c.set(&format!("maps.{id}.model"), &m.provenance.model_checksum);
        c.set(&format!("maps.{id}.config"), &m.provenance.config_digest);
        push_frames(&mut c, &format!("maps/{id}/saliency"), &m.saliency);
        push_frames(&mut c, &format!("maps/{id}/gradient"), &m.gradient_map);
        push_frames(&mut c, &format!("maps/{id}/edges"), &m.edges);
    }
    Ok(c)
}

pub fn dataset_from_container(c: &Container) -> Result<Dataset, DataError> {
    c.expect_kind(DATASET_KIND)?;
    let count: usize = c.get_parsed("count")?;
    let mut sequences = Vec::with_capacity(count);
    for i in 0..count {
        sequences.push(ImageSequence {
            id: c.get(&format!("seq.{i}.id"))?.to_string(),
            frames: read_frames(c, &format!("frames/{i}"))?,
            target: decode_target(c.get(&format!("seq.{i}.target"))?)?,
            domain_id: c.get(&format!("seq.{i}.domain"))?.to_string(),
        });
    }
    let mut ds = Dataset::new(sequences);
    for key in c.meta.keys() {
        let Some(id) = key.strip_prefix("maps.").and_then(|k| k.strip_suffix(".model")) else {
            continue;
        };
        ds.maps.insert(
            id.to_string(),
            SalientMaps {
                source_sequence_id: id.to_string(),
                saliency: read_frames(c, &format!("maps/{id}/saliency"))?,
                gradient_map: read_frames(c, &format!("maps/{id}/gradient"))?,
                edges: read_frames(c, &format!("maps/{id}/edges"))?,
                provenance: MapProvenance {
                    model_checksum: c.get(key)?.to_string(),
                    config_digest: c.get(&format!("maps.{id}.config"))?.to_string(),
                },
            },
        );
    }
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    Ok(dataset_to_container(ds)?.write(path)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    dataset_from_container(&Container::read(path)?)
}

/// Writes frame `t` as binary PPM (3 channels) or PGM (1 channel).
pub fn export_frame(frames: &Frames, t: usize, path: &Path) -> Result<(), DataError> {
    if t >= frames.t || (frames.c != 1 && frames.c != 3) {
        return Err(DataError::InvalidRequest(format!(
            "cannot export frame {t} of {:?}",
            frames.shape()
        )));
    }
    let mut header = String::new();
    let magic = if frames.c == 3 { "P6" } else { "P5" };
    write!(header, "{magic}\n{} {}\n255\n", frames.w, frames.h).expect("string write");
    let mut bytes = header.into_bytes();
    let plane = frames.h * frames.w;
    let f = frames.frame(t);
    for p in 0..plane {
        for ch in 0..frames.c {
            bytes.push((f[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}
