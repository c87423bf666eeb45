use shapesplit_core::ablate::battery_config;
use shapesplit_core::model::ModelConfig;
use shapesplit_core::parallel;
use shapesplit_core::synthdata::{generate, GenConfig};
use shapesplit_core::trainer::{run_experiment, Toggles, TrainConfig};

#[test]
#[ignore]
fn probe_m_window() {
    for (n, m, sigma_p) in [
        (12usize, 6usize, 0.6),
        (14, 8, 0.6),
        (12, 6, 1.0),
        (10, 6, 0.6),
    ] {
        let gen = GenConfig {
            identities: 384,
            test_identities: 256,
            samples_per_modality: 4,
            sigma_pose: sigma_p,
            appearance_carryover: 1.0,
            ..GenConfig::default()
        };
        let mut base = battery_config(ModelConfig {
            classes: 128,
            n,
            m,
            ..ModelConfig::default()
        });
        base.epochs = 20;
        base.eval_every = 20;
        base.lr_decay_epochs = vec![12, 17];
        let jobs: Vec<(u64, bool)> = (0..3u64).flat_map(|s| [(s, true), (s, false)]).collect();
        let results: Vec<(u64, bool, f64, f64, f64, f64, f64)> =
            parallel::map_slice(&jobs, |&(seed, full)| {
                let dataset = generate(&gen, seed).unwrap();
                let cfg = TrainConfig {
                    seed,
                    toggles: if full {
                        Toggles::default()
                    } else {
                        Toggles::baseline()
                    },
                    ..base.clone()
                };
                let out = run_experiment(&cfg, &dataset).unwrap();
                let e = out.final_eval;
                (seed, full, e.r2_z, e.r2_zsr, e.r2_zse, e.map, e.map_zse)
            });
        println!("== n {n} m {m} sigma_p {sigma_p}");
        for (seed, full, r2z, r2sr, r2se, map, map_zse) in results {
            println!(
                "  seed {seed} {}: r2_z {r2z:.3} r2_zsr {r2sr:.3} r2_zse {r2se:.3} map {map:.3} map_zse {map_zse:.3} win {}",
                if full { "full" } else { "base" },
                r2se < r2sr
            );
        }
    }
}
