LOG_FILE = "cgdet.log"
CONFIG_ENV_VAR = "CGDET_CONFIG"

PE_CLASS = 0
LABEL_PE = "PE"
LABEL_NON_PE = "NonPE"

# soft-tissue window
WINDOW_LEVEL = 40.0
WINDOW_WIDTH = 400.0

FUSION_METHOD = "WBF"
FUSION_IOU_THRESHOLD = 0.3
FUSION_SCORE_FLOOR = 0.005
DEFAULT_MODEL_WEIGHT = 1.0

GUIDANCE_THETA = 0.5
GUIDANCE_CONF_FLOOR = 0.018

EVAL_IOU_THRESHOLDS = (0.2, 0.5)
EVAL_SCORE_THRESHOLD = 0.005
OPERATING_POINT_THRESHOLDS = (0.005, 0.018, 0.05, 0.1, 0.25, 0.5)

ANNOTATION_MARGIN = 5
SMALL_ROI_SIDE = 30

BCE_EPSILON = 1e-12
DECIMALS = 6

SCHEMA_PREDICTIONS = "cgdet.predictions/1"
SCHEMA_VERDICTS = "cgdet.verdicts/1"
SCHEMA_GROUND_TRUTH = "cgdet.ground_truth/1"
SCHEMA_MANIFEST = "cgdet.manifest/1"
SCHEMA_REPORT = "cgdet.report/1"
SCHEMA_CROP = "cgdet.crop/1"
SCHEMA_ANNOTATION = "cgdet.annotation/1"
SCHEMA_VALIDATION = "cgdet.validation/1"
