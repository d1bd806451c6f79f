//! Temporary scratch probe: per-sample held-out potential error for a
//! trained checkpoint. Not part of the deliverable.

use eit_core::dataset::{load_dataset, Split};
use eit_core::stage1::{load_checkpoint, predict_potential};

fn main() {
    let mut args = std::env::args().skip(1);
    let data = args.next().expect("usage: probe_score <data> <ckpt>");
    let ckpt = args.next().expect("usage: probe_score <data> <ckpt>");
    let ds = load_dataset(std::path::Path::new(&data)).unwrap();
    let (model, _) = load_checkpoint(std::path::Path::new(&ckpt), Some(&ds.manifest.stats)).unwrap();
    let grid = ds.grid().unwrap();
    let n = ds.manifest.config.grid_n;

    let mut errs: Vec<(f64, usize, String)> = Vec::new();
    for id in ds.indices_of(Split::Test) {
        let raw: Vec<f64> = ds.dv.row(id).iter().map(|v| *v as f64).collect();
        let pred = predict_potential(&model, &raw, &ds.manifest.stats, &grid).unwrap();
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                if grid.is_masked(i, j) {
                    let t = ds.u[[id, i, j]] as f64;
                    let d = pred.values[[i, j]] - t;
                    num += d * d;
                    den += t * t;
                }
            }
        }
        let rel = (num / den).sqrt();
        errs.push((rel, id, format!("{:?}", ds.manifest.records[id].family)));
    }
    errs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for (rel, id, fam) in &errs {
        println!("{rel:.4}  case {id} {fam}");
    }
    let median = errs[errs.len() / 2].0;
    let p90 = errs[(errs.len() * 9) / 10].0;
    println!(
        "n={} median {:.4} p90 {:.4} worst {:.4}",
        errs.len(),
        median,
        p90,
        errs.last().unwrap().0
    );
}
