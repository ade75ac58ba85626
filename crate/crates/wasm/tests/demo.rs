// SPDX-License-Identifier: MIT OR Apache-2.0

use patchlens_core::attribution::MapMethod;
use patchlens_core::ErrorKind;
use patchlens_wasm::Demo;
use serde_json::Value;

#[test]
fn scene_question_probe_and_heatmap() {
    let mut demo = Demo::new().unwrap();
    let view = demo.draw_scene(7, 2).unwrap();
    let object = view.scene.objects[0].clone();
    assert_eq!(&view.png[1..4], b"PNG");

    let q = format!("What is the color of the {}?", object.animal);
    let a = demo.ask_image(&q, None).unwrap();
    assert_eq!(a.response.predicted.token, object.color);
    assert_eq!(a.response.passes.traced, 1);
    assert!(a.response.timing.is_none());

    let probe: Value =
        serde_json::from_str(&demo.probe_cell(object.row, object.col, 0, 5).unwrap()).unwrap();
    assert_eq!(probe["passes"], 0);
    assert_eq!(
        probe["result"]["projection"]["tokens"]
            .as_array()
            .unwrap()
            .len(),
        5
    );

    for m in [MapMethod::Logprob, MapMethod::AvgAttention] {
        assert_eq!(&demo.heatmap(m).unwrap()[1..4], b"PNG");
    }
}

#[test]
fn text_mode_and_misuse() {
    let mut demo = Demo::new().unwrap();
    assert_eq!(
        demo.ask_image("What is the color of the cat?", None)
            .unwrap_err()
            .kind(),
        ErrorKind::Input
    );
    assert_eq!(demo.draw_scene(1, 0).unwrap_err().kind(), ErrorKind::Input);

    let a = demo
        .ask_text("Dog is purple.", "What is the color of the dog?")
        .unwrap();
    assert_eq!(a.response.predicted.token, "purple");
    assert!(a.response.maps.is_none());
    assert_eq!(
        demo.heatmap(MapMethod::Logprob).unwrap_err().kind(),
        ErrorKind::Input
    );
    assert_eq!(
        demo.probe_cell(0, 0, 0, 3).unwrap_err().kind(),
        ErrorKind::Input
    );
}

#[test]
fn seeds_are_reproducible() {
    let mut a = Demo::new().unwrap();
    let mut b = Demo::new().unwrap();
    assert_eq!(
        a.draw_scene(3, 3).unwrap().png,
        b.draw_scene(3, 3).unwrap().png
    );
}
