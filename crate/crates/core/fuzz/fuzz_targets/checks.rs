//! Checks shared by the fuzz targets and the corpus replay test. Each takes
//! arbitrary bytes and panics only on a real bug.

#![allow(dead_code)]

use ipr_core::config::ExperimentConfig;
use ipr_core::ddpm::ModelState;
use ipr_core::detector::DetectionRecord;
use ipr_core::scenegen::{
    decode_latent, encode_scene, parse_prompt, render_prompt, PromptRecord, SceneLatent, World,
};
use ipr_core::tensornet::Checkpoint;

fn worlds() -> [World; 2] {
    [World::default(), World::default().with_colors()]
}

pub fn parse_prompt_bytes(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    for world in worlds() {
        if let Ok(p) = parse_prompt(text, &world) {
            let text = render_prompt(&p, p.template, &world).unwrap();
            assert_eq!(parse_prompt(&text, &world).unwrap(), p);
        }
    }
}

pub fn parse_config_bytes(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ExperimentConfig::parse(text) {
        assert_eq!(ExperimentConfig::parse(&cfg.serialize()).unwrap(), cfg);
    }
}

pub fn decode_checkpoint_bytes(data: &[u8]) {
    if let Ok(ck) = Checkpoint::decode(data) {
        let bytes = ck.encode().unwrap();
        assert_eq!(Checkpoint::decode(&bytes).unwrap().encode().unwrap(), bytes);
        let _ = ModelState::from_checkpoint(&ck);
    }
}

/// Input bytes are read as little-endian f64 coordinates.
pub fn decode_latent_bytes(data: &[u8]) {
    let z: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    for world in worlds() {
        if let Ok(scene) = decode_latent(&SceneLatent(z.clone()), &world, 0.0) {
            let back = decode_latent(&encode_scene(&scene, &world), &world, 0.0).unwrap();
            assert_eq!(back, scene);
        }
    }
}

pub fn prompt_record_bytes(data: &[u8]) {
    let Ok(rec) = serde_json::from_slice::<PromptRecord>(data) else {
        return;
    };
    for world in worlds() {
        if let Ok(p) = rec.to_prompt(&world) {
            let again = PromptRecord::from_prompt(&p, &world, None).unwrap();
            assert_eq!(again.to_prompt(&world).unwrap(), p);
        }
    }
}

pub fn detection_record_bytes(data: &[u8]) {
    let Ok(rec) = serde_json::from_slice::<DetectionRecord>(data) else {
        return;
    };
    for world in worlds() {
        if let Ok(d) = rec.to_detection(&world) {
            let again = DetectionRecord::from_detection(&d, &world);
            assert_eq!(again.to_detection(&world).unwrap(), d);
        }
    }
}
