fn main() {
    use eikray::fields::smooth::{bake_masked_grid, progression_kernels};
    use eikray::recon::{collect_train_rays, load_model};
    use eikray::scene::{build_scene, dataset};
    use eikray::transport::{trace_mixed, Exterior, ModelBundle, TraceConfig};
    let ds = dataset::load_dataset(std::path::Path::new("/tmp/ds2")).unwrap();
    let spec: eikray::scene::SceneSpec =
        serde_json::from_str(&std::fs::read_to_string("/tmp/ds2/scene.json").unwrap()).unwrap();
    let scene = build_scene(&spec).unwrap();
    let refr_box = dataset::read_box(std::path::Path::new("/tmp/ds2/box.json")).unwrap();
    let cfg = TraceConfig { far_bound: spec.far_bound, ..TraceConfig::default() };
    let kernels = progression_kernels(0.08, 5);
    let levels = bake_masked_grid(&scene.backdrops, &refr_box, &spec.bg_domain, [128;3], &kernels).unwrap();
    let rays = collect_train_rays(&ds, Some(&refr_box));

    // Bake GT ior into a 64^3 raw grid.
    use eikray::fields::ior::{softplus_inv, IorField, Refractive};
    let gt = spec.gt_ior_field();
    let mut gt_grid = IorField::init_on_box(refr_box.min, refr_box.max, [64;3], -10.0);
    let d = gt_grid.raw.dims;
    for k in 0..d[2] { for j in 0..d[1] { for i in 0..d[0] {
        let p = gt_grid.raw.node_pos(i, j, k);
        let idx = gt_grid.raw.value_index(i, j, k, 0);
        gt_grid.raw.values[idx] = softplus_inv((gt.ior(p) - 1.0).max(4.5e-5)) as f32;
    }}}
    let fitted = load_model(std::path::Path::new("/tmp/model5k2")).unwrap().ior.unwrap();
    let base = IorField::init_on_box(refr_box.min, refr_box.max, [2;3], -10.0);

    for (name, ior) in [("baseline n=1", &base), ("gt-baked    ", &gt_grid), ("fitted      ", &fitted)] {
        let model = ModelBundle { ior, exterior: Exterior::Baked(&levels[4].grids), interior: None, refr_box: Some(refr_box) };
        let mut l1 = 0.0;
        let mut count = 0usize;
        for ray in rays.iter().step_by(7) {
            let out = trace_mixed(&model, ray.origin, ray.dir, &cfg).unwrap();
            for c in 0..3 { l1 += (out.radiance[c] - ray.target[c]).abs(); count += 1; }
        }
        println!("{name}: train L1 (level4 bg) = {:.5}", l1 / count as f64);
    }
}
