//! Browser bindings for the synthetic world and the caption metrics.

use ctrlcap::image::Image;
use ctrlcap::metrics::{is_controlled, iou, meteor_lite, template_of, tokenize};
use ctrlcap::synthworld::{generate_scene, realize_with_template, render, BBox, SceneGraph, TemplateId, WorldConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Encoder input resolution of the default model.
pub const VIEW_SIZE: usize = 56;

fn scene(scene_id: u32, seed: u32) -> Result<SceneGraph, JsError> {
    generate_scene(scene_id as u64, seed as u64, &WorldConfig::default()).map_err(|e| JsError::new(&e.to_string()))
}

fn rgba(img: &Image) -> Vec<u8> {
    img.to_rgba8()
}

#[wasm_bindgen]
pub fn canvas_size() -> u32 {
    WorldConfig::default().canvas_size
}

#[wasm_bindgen]
pub fn view_size() -> u32 {
    VIEW_SIZE as u32
}

/// RGBA pixels of a rendered scene.
#[wasm_bindgen]
pub fn render_scene(scene_id: u32, seed: u32) -> Result<Vec<u8>, JsError> {
    Ok(rgba(&render(&scene(scene_id, seed)?)))
}

/// Objects of a scene with one caption per template (ineligible templates
/// fall back to the plain one), as JSON.
#[wasm_bindgen]
pub fn describe_scene(scene_id: u32, seed: u32) -> Result<String, JsError> {
    let s = scene(scene_id, seed)?;
    let cfg = WorldConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(scene_id as u64);
    let mut objects = Vec::new();
    for o in &s.objects {
        let mut captions = Vec::new();
        for t in TemplateId::ALL {
            let r = realize_with_template(&s, o.id, t, &cfg, &mut rng).map_err(|e| JsError::new(&e.to_string()))?;
            captions.push(json!({"template": r.template_id, "caption": r.caption_text()}));
        }
        objects.push(json!({
            "id": o.id,
            "box": <[u32; 4]>::from(o.bbox),
            "shape": o.shape,
            "color": o.color,
            "size": o.size,
            "texture": o.texture,
            "captions": captions,
        }));
    }
    Ok(json!({"scene_id": scene_id, "objects": objects}).to_string())
}

/// The region view the encoder sees for a box: the crop resized to the
/// encoder resolution, RGBA.
#[wasm_bindgen]
pub fn region_view(scene_id: u32, seed: u32, x: u32, y: u32, w: u32, h: u32) -> Result<Vec<u8>, JsError> {
    let canvas = render(&scene(scene_id, seed)?);
    let b = BBox::new(x, y, w, h);
    if !b.is_valid_in(canvas.width as u32, canvas.height as u32) {
        return Err(JsError::new("box must lie inside the image and have positive size"));
    }
    Ok(rgba(&canvas.crop_resize(&b, VIEW_SIZE, VIEW_SIZE)))
}

/// IoU of a box with every object of the scene, as a JSON array.
#[wasm_bindgen]
pub fn box_overlaps(scene_id: u32, seed: u32, x: u32, y: u32, w: u32, h: u32) -> Result<String, JsError> {
    let s = scene(scene_id, seed)?;
    let b = BBox::new(x, y, w, h);
    let v: Vec<_> = s.objects.iter().map(|o| json!({"id": o.id, "iou": iou(&b, &o.bbox)})).collect();
    Ok(serde_json::Value::Array(v).to_string())
}

/// METEOR against newline-separated references, the caption's template
/// and whether every control word appears in it, as JSON.
#[wasm_bindgen]
pub fn score_caption(candidate: &str, references: &str, controls: &str) -> String {
    let cand = tokenize(candidate);
    let refs: Vec<Vec<String>> = references.lines().map(tokenize).filter(|r| !r.is_empty()).collect();
    let ctl = tokenize(controls);
    json!({
        "meteor": meteor_lite(&cand, &refs),
        "template": template_of(&cand),
        "controlled": is_controlled(&cand, &ctl),
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_pixels_and_views_have_the_right_size() {
        let n = canvas_size() as usize;
        assert_eq!(render_scene(3, 0).unwrap().len(), n * n * 4);
        assert_eq!(region_view(3, 0, 10, 10, 30, 20).unwrap().len(), VIEW_SIZE * VIEW_SIZE * 4);
    }

    #[test]
    fn description_lists_three_captions_per_object() {
        let v: serde_json::Value = serde_json::from_str(&describe_scene(5, 0).unwrap()).unwrap();
        let objects = v["objects"].as_array().unwrap();
        assert!(!objects.is_empty());
        for o in objects {
            assert_eq!(o["captions"].as_array().unwrap().len(), 3);
        }
    }

    #[test]
    fn overlaps_peak_on_an_object_box() {
        let v: serde_json::Value = serde_json::from_str(&describe_scene(7, 0).unwrap()).unwrap();
        let b: Vec<u32> = serde_json::from_value(v["objects"][0]["box"].clone()).unwrap();
        let o: serde_json::Value = serde_json::from_str(&box_overlaps(7, 0, b[0], b[1], b[2], b[3]).unwrap()).unwrap();
        assert_eq!(o[0]["iou"], 1.0);
    }

    #[test]
    fn scores_identical_caption() {
        let v: serde_json::Value =
            serde_json::from_str(&score_caption("a striped red circle", "a striped red circle", "striped")).unwrap();
        assert!((v["meteor"].as_f64().unwrap() - (1.0 - 0.5 / 64.0)).abs() < 1e-12);
        assert_eq!(v["template"], "T1");
        assert_eq!(v["controlled"], true);
    }
}
