mod common;

use common::toy_end_to_end;
use hypergraph_vqa::config::ModeFlags;

#[test]
fn end_to_end_toy_model() {
    let r = toy_end_to_end(ModeFlags::default());
    println!("{r:?}");
    assert!(r.worst < 1e-3, "{r:?}");
}

#[test]
fn end_to_end_gt_graph() {
    let r = toy_end_to_end(ModeFlags {
        gt_graph: true,
        ..ModeFlags::default()
    });
    println!("{r:?}");
    assert!(r.worst < 1e-3, "{r:?}");
}

#[test]
fn every_op_and_layer_matches_finite_differences() {
    let mut failed = Vec::new();
    for (name, case) in common::ops::cases() {
        let r = case();
        println!("{name:<22} worst {:.2e} over {} entries", r.worst, r.checked);
        if r.worst >= 1e-4 {
            failed.push(format!("{name}: {r:?}"));
        }
    }
    assert!(failed.is_empty(), "{failed:#?}");
}
