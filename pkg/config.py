# Configuration for the mixedobj text classifier

# Optimizer (Adam) and schedule defaults
LEARNING_RATE = 1e-3
ADAM_BETA1 = 0.0
ADAM_BETA2 = 0.98
ADAM_EPSILON = 1e-8
DECAY_RATE = 0.95          # per-epoch exponential learning-rate decay
CLIP_NORM = 1.0            # maximum global L2 norm of the gradient

# Regularization
P_DROP = 0.5               # dropout on embeddings, between layers and on encoder states
P_WORD = 0.1               # word dropout (token -> UNK)

# Mixed objective
LAMBDA_DEFAULT = 1.0        # weight of the supervised term unless an objective overrides it
XI = 0.1                   # VAT power-iteration step scale

# Model shape
EMBED_DIM = 300
HIDDEN_SIZE = 512          # per direction
NUM_LAYERS = 1
EMBED_MODE = 'finetune'

# Epoch counts per objective family
EPOCHS_SUPERVISED = 20
EPOCHS_MIXED = 50

# Training loop
SEED = 1
DEV_FRACTION = 0.1         # held-out share of labeled data when no dev file is given
MAX_CONSECUTIVE_ANOMALIES = 10
EVAL_BATCH_SIZE = 32
UNLABELED_BATCHING = 'tokens'   # or 'examples'

# Analysis
HISTOGRAM_BINS = 20
GRID_STEP = 0.05
NEIGHBORS_K = 10
THREADS_ENV_VAR = 'MIXEDOBJ_THREADS'

# Logging
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# Per-dataset settings: token budget per batch, vocabulary size, epsilon, classes
PRESETS = {
    'acl-imdb': {'token_budget': 3000, 'vocab_size': 80000, 'epsilon': 5.0, 'num_classes': 2},
    'elec': {'token_budget': 2000, 'vocab_size': 40000, 'epsilon': 2.0, 'num_classes': 2},
    'ag-news': {'token_budget': 2000, 'vocab_size': 75000, 'epsilon': 1.0, 'num_classes': 4},
    'dbpedia': {'token_budget': 7500, 'vocab_size': 50000, 'epsilon': 1.0, 'num_classes': 14},
    'rcv1': {'token_budget': 2000, 'vocab_size': 100000, 'epsilon': 2.0, 'num_classes': 51},
    'imdb': {'token_budget': 15000, 'vocab_size': 150000, 'epsilon': 5.0, 'num_classes': 5},
    'arxiv': {'token_budget': 8000, 'vocab_size': 100000, 'epsilon': 1.0, 'num_classes': 127},
    # Desk-scale runs on generated data
    'synthetic': {
        'token_budget': 500,
        'vocab_size': 200,
        'epsilon': 0.5,
        'num_classes': 2,
        'embed_dim': 16,
        'hidden_size': 16,
        'learning_rate': 0.01,
        'p_drop': 0.2,
        'embed_mode': 'random',
        'synthetic': True,
    },
}

# --objective shortcuts: (lambda_ml, lambda_at, lambda_em, lambda_vat), epochs, unlabeled data
OBJECTIVES = {
    'ml': {'lambdas': (1.0, 0.0, 0.0, 0.0), 'epochs': EPOCHS_SUPERVISED, 'use_unlabeled': False},
    'at': {'lambdas': (1.0, 1.0, 0.0, 0.0), 'epochs': EPOCHS_MIXED, 'use_unlabeled': False},
    'em': {'lambdas': (1.0, 0.0, 1.0, 0.0), 'epochs': EPOCHS_MIXED, 'use_unlabeled': True},
    'vat': {'lambdas': (1.0, 0.0, 0.0, 1.0), 'epochs': EPOCHS_MIXED, 'use_unlabeled': True},
    'mixed': {'lambdas': (1.0, 1.0, 1.0, 1.0), 'epochs': EPOCHS_MIXED, 'use_unlabeled': True},
}

# Objective-term ablation: labeled used, unlabeled used, lambda_ml, lambda_at, lambda_em, lambda_vat
TABLE5_GRID = [
    (1, 0, 1, 0, 0, 0),
    (1, 0, 1, 1, 0, 0),
    (1, 0, 1, 0, 1, 0),
    (1, 0, 1, 0, 0, 1),
    (1, 0, 1, 1, 1, 1),
    (1, 1, 1, 0, 1, 0),
    (1, 1, 1, 0, 0, 1),
    (1, 1, 1, 0, 1, 1),
    (1, 1, 1, 1, 1, 1),
]

# Model/training ablation under the ML objective; each row overrides the base row
TABLE7_GRID = [
    {'name': 'base'},
    {'name': 'layers-2', 'num_layers': 2},
    {'name': 'embed-random', 'embed_mode': 'random'},
    {'name': 'embed-static', 'embed_mode': 'static'},
    {'name': 'p_w-0', 'p_w': 0.0},
    {'name': 'bsize-1000', 'token_budget': 1000},
    {'name': 'hidden-256', 'hidden_size': 256},
    {'name': 'hidden-1024', 'hidden_size': 1024},
    {'name': 'vocab-30000', 'vocab_size': 30000},
    {'name': 'no-preprocess', 'preprocess': False},
]

# Run directory layout
CONFIG_FILE_NAME = 'config.json'
METRICS_FILE_NAME = 'metrics.jsonl'
VOCAB_FILE_NAME = 'vocab.tsv'
BEST_CHECKPOINT_NAME = 'best.npz'
LAST_CHECKPOINT_NAME = 'last.npz'
REPORT_FILE_NAME = 'report.json'
SWEEP_CSV_NAME = 'sweep.csv'
SWEEP_XLSX_NAME = 'sweep.xlsx'
