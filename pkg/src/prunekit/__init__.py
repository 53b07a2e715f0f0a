"""prunekit: desk-scale compression experiments for encoder-decoder
transformers — metric-guided layer pruning, NF4 double quantization with
rank-stabilized low-rank adapters, and sequence-level knowledge
distillation, orchestrated as multi-stage recipes with quantitative
reporting."""

from .checkpoint import load_model, save_model
from .data import (
    BOS_ID,
    EOS_ID,
    OOD_SWEEP_SIZES,
    PAD_ID,
    ParallelCorpus,
    Segment,
    TaskSpec,
    gen_corpus,
    gen_ood_corpus,
    load_jsonl,
    make_task,
    save_jsonl,
    tokens_to_text,
    train_test_split,
)
from .distill import augment, generate_kd, oversample
from .lora import (
    LoraAdapter,
    LoraConfig,
    adapter_forward,
    attach_adapters,
    merge_adapter,
    qlora_finetune,
    trainable_fraction,
)
from .metrics import ScoreReport, ScorerConfig, bleu, chrf, make_scorer, score
from .model import (
    LayerId,
    ModelConfig,
    TrainConfig,
    TransformerModel,
    analytic_layer_params,
    analytic_param_count,
    build,
    forward,
    greedy_decode,
    param_count,
    remove_layer,
    train_full,
)
from .numerics import AdamW, GradCheckReport, Rng, Tensor, adamw_step, grad_check
from .pipeline import (
    ExperimentManifest,
    RecipeConfig,
    quality_retention,
    render_report,
    run_ood_size_sweep,
    run_recipe,
    setup1_recipe,
    setup2_recipe,
)
from .pruning import (
    ImportanceReport,
    PruningPlan,
    PruningStrategy,
    apply_plan,
    evaluate_layer_importance,
    prune_iteratively,
    prune_middle,
    prune_with_recovery,
)
from .quant import (
    DoubleQuantMeta,
    Nf4Codebook,
    QuantizedTensor,
    StorageReport,
    build_nf4_codebook,
    bytes_to_gb,
    dequantize,
    double_quant_overhead_bits_per_param,
    quantize_model,
    quantize_nf4,
    storage_bytes,
)

__version__ = "0.1.0"
