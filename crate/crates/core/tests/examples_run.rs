macro_rules! example {
    ($module:ident, $file:literal, $test:ident) => {
        mod $module {
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", $file));
        }

        #[test]
        fn $test() {
            $module::run_example().expect(concat!($file, " should run"));
        }
    };
}

example!(sinkhorn_transport, "sinkhorn_transport.rs", sinkhorn_transport_runs);
example!(prototype_ema, "prototype_ema.rs", prototype_ema_runs);
example!(three_way_pseudo_labels, "three_way_pseudo_labels.rs", three_way_pseudo_labels_runs);
example!(dual_consistency, "dual_consistency.rs", dual_consistency_runs);
example!(gradient_check, "gradient_check.rs", gradient_check_runs);
example!(synthetic_shift, "synthetic_shift.rs", synthetic_shift_runs);
example!(train_and_eval, "train_and_eval.rs", train_and_eval_runs);
example!(ablation, "ablation.rs", ablation_runs);
