//! Fuzz target bodies, shared by the libFuzzer binaries and the corpus replay test.

use std::io::Cursor;

use dreamview_cli::config::{parse_config_text, resolve};
use dreamview_core::checkpoint::{decode, CheckpointIndex};
use dreamview_core::diffusion::parse_loss_log;
use dreamview_core::image::Image;
use dreamview_core::inject::parse_decision_log;
use dreamview_core::scenegen::{merge_captions, parse_overall_caption, parse_view_caption, DatasetManifest};
use dreamview_core::textenc::{tokenize, Vocabulary, MAX_TOKENS};

pub fn checkpoint_index(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(index) = CheckpointIndex::parse(text) else { return };
    let len = index.data_len();
    if len <= 1 << 16 {
        let tensors = decode(&index, &vec![0; len as usize]).expect("validated index decodes its own length");
        assert_eq!(tensors.len(), index.tensors.len());
        assert!(decode(&index, &vec![0; len as usize + 4]).is_err());
    }
}

pub fn manifest(data: &[u8]) {
    let _ = DatasetManifest::from_json(data);
}

pub fn decision_log(data: &[u8]) {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_decision_log(text);
    }
}

pub fn config(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(map) = parse_config_text(text) {
        let _ = resolve(&[map]);
    }
}

pub fn captions(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_view_caption(text);
    if let Some(scene) = parse_overall_caption(text) {
        assert_eq!(parse_overall_caption(&merge_captions(&scene)), Some(scene));
    }
}

pub fn tokenize_prompt(data: &[u8]) {
    let text = String::from_utf8_lossy(data);
    let seq = tokenize(&text, &Vocabulary::default());
    assert_eq!(seq.ids().len(), MAX_TOKENS);
    assert!(seq.content_len() <= text.split_whitespace().count().min(MAX_TOKENS));
}

pub fn png(data: &[u8]) {
    if let Ok(image) = Image::decode_png(Cursor::new(data)) {
        assert_eq!(image.to_rgb8().len(), image.width * image.height * 3);
    }
}

pub fn loss_log(data: &[u8]) {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_loss_log(text);
    }
}
