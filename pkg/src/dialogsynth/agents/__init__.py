from .parsing import StyleReport, parse_plan_response, parse_style_response, render_style_response
from .pipeline import (
    DialoguePipeline,
    LoopConfig,
    PipelineResult,
    PipelineTrace,
    RecordResult,
    iter_pipeline,
    mean_iterations,
    run_pipeline,
)
from .prompts import PromptTemplates, render_template

__all__ = [
    "DialoguePipeline",
    "LoopConfig",
    "PipelineResult",
    "PipelineTrace",
    "PromptTemplates",
    "RecordResult",
    "StyleReport",
    "iter_pipeline",
    "mean_iterations",
    "parse_plan_response",
    "parse_style_response",
    "render_style_response",
    "render_template",
    "run_pipeline",
]
