// Scratch: training + inference timing probe. Deleted before ship.
use myoscan_core::metrics::dice;
use myoscan_core::phantom::{generate_phantom, PhantomParams};
use myoscan_core::seg::*;
use myoscan_core::volume::Dims;
use std::time::Instant;

#[test]
#[ignore]
fn probe_desk_scale_segmentation() {
    let dims = Dims::new(48, 48, 24);
    let params = PhantomParams::for_dims(dims);
    let train: Vec<_> = (0..4)
        .map(|i| generate_phantom(100 + i, &format!("tr{i}"), &params).unwrap())
        .collect();
    let test: Vec<_> = (0..2)
        .map(|i| generate_phantom(200 + i, &format!("te{i}"), &params).unwrap())
        .collect();

    let hyper = SegTrainHyper {
        epochs: std::env::var("EPOCHS").map(|v| v.parse().unwrap()).unwrap_or(10),
        minibatches_per_epoch: 25,
        batch_size: 32,
        dropout_rate: 0.5,
        learning_rate: std::env::var("LR").map(|v| v.parse().unwrap()).unwrap_or(0.02),
        momentum: 0.9,
        near_distance: 20.0,
        near_weight: 4.0,
    };
    let t0 = Instant::now();
    let (model, losses) = train_segmentation_cnn(&train, &hyper, 7).unwrap();
    println!("train: {:.1}s, losses {:?}", t0.elapsed().as_secs_f64(), losses);

    for p in &test {
        let t1 = Instant::now();
        let grid = classify_sparse_grid(&model, &p.volume, 5).unwrap();
        let t_grid = t1.elapsed().as_secs_f64();
        let (rough, empty) = rough_segmentation(&grid, 5, 1.0, 0.5).unwrap();
        if empty {
            println!("{}: EMPTY rough", p.id);
            continue;
        }
        let d_rough = dice(&rough, &p.mask).unwrap();
        let t2 = Instant::now();
        let refined = refine_surface(&model, &p.volume, &rough, 50).unwrap();
        let t_refine = t2.elapsed().as_secs_f64();
        let d_ref = dice(&refined.mask, &p.mask).unwrap();
        println!(
            "{}: grid {:.1}s refine {:.1}s ({} iters, {:?}) dice rough {:.3} refined {:.3} mask {} pred {}",
            p.id, t_grid, t_refine, refined.iterations, refined.status, d_rough, d_ref,
            p.mask.count(), refined.mask.count()
        );
    }
}
