use std::path::PathBuf;

use ctm_fewshot::Config;

fn shipped(name: &str) -> Config {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    Config::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn desk_config_spells_out_the_defaults() {
    assert_eq!(shipped("desk.cfg"), Config::default());
}

#[test]
fn shipped_configs_validate() {
    for name in ["desk.cfg", "toy_benchmark.cfg", "paper.cfg"] {
        shipped(name).validate().unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn paper_scale_dimensions() {
    let model = shipped("paper.cfg").model();
    let (m1, d1) = model.backbone.output_dims(84).unwrap();
    assert_eq!((m1, d1), (64, 21));
    let dims = model.ctm.dims(m1, d1).unwrap();
    assert_eq!((dims.m2, dims.d2, dims.m3, dims.d3), (32, 10, 32, 10));
}

#[test]
fn benchmark_arms_share_every_other_setting() {
    let base = shipped("toy_benchmark.cfg");
    let mut same_size = base.clone();
    same_size.set("ctm.enabled", "false").unwrap();
    same_size.set("model.same_size", "true").unwrap();
    same_size.validate().unwrap();
    assert_eq!(same_size.train, base.train);
    assert_eq!(same_size.toy, base.toy);
}
