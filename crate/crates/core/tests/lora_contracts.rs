#[allow(dead_code)]
#[path = "common/lora.rs"]
mod lora;

macro_rules! cases {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                lora::$name();
            }
        )*
    };
}

cases!(
    fresh_adapters_leave_logits_bit_equal,
    base_weights_frozen_after_100_steps,
    merged_weights_reproduce_trained_adapters,
    micro_batching_does_not_change_the_step,
    adapter_contribution_is_linear_in_alpha,
);
