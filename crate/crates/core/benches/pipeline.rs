//! Stage timings on a 1024x1024 phantom.
//!
//! With the default `parallel` feature every stage runs twice: on rayon's
//! global pool and inside a one-thread pool. `cargo bench -p retreg
//! --no-default-features` measures the plain sequential build instead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use retreg::enhancement::{enhance, InputImage, Modality};
use retreg::features::{detect_bifurcations, ValidationParams};
use retreg::phantom::{random_tree_spec, render, warp, RandomTreeParams};
use retreg::pipeline::{register_images, PipelineConfig};
use retreg::raster::GrayImage;
use retreg::segmentation::{extract_vessels, SegmentationParams};
use retreg::transform::{Point, TransformModel};

struct Runner {
    name: &'static str,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl Runner {
    fn run<R>(&self, f: impl FnOnce() -> R + Send) -> R
    where
        R: Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(f);
        }
        f()
    }
}

fn runners() -> Vec<Runner> {
    #[cfg(feature = "parallel")]
    {
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        vec![
            Runner { name: "rayon", pool: None },
            Runner { name: "one-thread", pool: Some(one) },
        ]
    }
    #[cfg(not(feature = "parallel"))]
    {
        vec![Runner { name: "sequential" }]
    }
}

fn phantom_pair() -> (GrayImage, GrayImage) {
    let (image, truth) = render(&random_tree_spec(11, &RandomTreeParams::default()).unwrap()).unwrap();
    let model = TransformModel::similarity_about(Point::new(511.5, 511.5), 1.01, 3.0, 12.0, -7.0);
    let (warped, _) = warp(&image, &truth, &model).unwrap();
    (image, warped)
}

fn stages(c: &mut Criterion) {
    let (image, warped) = phantom_pair();
    let enhanced = enhance(&image, Modality::Angiography).unwrap().image;
    let seg = SegmentationParams::default();
    let vessels = extract_vessels(&enhanced, &image, &seg).unwrap().vessels;
    let validation = ValidationParams::default();
    let config = PipelineConfig::default();
    let (a, b) = (InputImage::Gray(image.clone()), InputImage::Gray(warped));

    let mut group = c.benchmark_group("stages");
    group.sample_size(10);
    for runner in runners() {
        group.bench_function(BenchmarkId::new("matched-filter", runner.name), |bch| {
            bch.iter(|| runner.run(|| enhance(&image, Modality::Angiography).unwrap()))
        });
        group.bench_function(BenchmarkId::new("segmentation", runner.name), |bch| {
            bch.iter(|| runner.run(|| extract_vessels(&enhanced, &image, &seg).unwrap()))
        });
        group.bench_function(BenchmarkId::new("bifurcations", runner.name), |bch| {
            bch.iter(|| runner.run(|| detect_bifurcations(&enhanced, &vessels, &validation).unwrap()))
        });
        group.bench_function(BenchmarkId::new("register-pair", runner.name), |bch| {
            bch.iter(|| runner.run(|| register_images(&a, &b, &config).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, stages);
criterion_main!(benches);
