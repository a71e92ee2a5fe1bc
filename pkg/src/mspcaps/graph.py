"""The training run as a state graph: load, build, then alternate train and evaluate epochs."""

import json
import logging
from pathlib import Path
from typing import Any, Literal, Optional

import numpy as np
from langchain_core.runnables import RunnableConfig
from langgraph.graph import END, START, StateGraph

from mspcaps.configuration import Configuration, RunConfig
from mspcaps.data import load_dataset
from mspcaps.model import build_model as build_mspcaps
from mspcaps.model import count_params
from mspcaps.optim import AdamW, Schedule
from mspcaps.state import InputState, OutputState, OverallState
from mspcaps.train import (
    MetricsRow,
    append_metrics,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train_epoch,
    training_steps,
)

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
BEST_CHECKPOINT = "best.ckpt"
LAST_CHECKPOINT = "last.ckpt"
RESOLVED_CONFIG = "config.resolved.json"


def _out_dir(run: RunConfig) -> Path:
    return Path(run.out_dir)


def load_data(state: OverallState, config: RunnableConfig) -> dict[str, Any]:
    """Read both splits of the configured dataset."""
    run = state.run
    train = load_dataset(run.dataset, run.data_dir, "train", run.limit_train)
    test = load_dataset(run.dataset, run.data_dir, "test", run.limit_test)
    return {"train_data": train, "test_data": test}


def build_model(state: OverallState, config: RunnableConfig) -> dict[str, Any]:
    """Build model, optimizer and schedule; restore them from a checkpoint when resuming."""
    run = state.run
    assert run.epochs is not None and run.lr is not None and state.train_data is not None
    model_config = run.model_config_for()
    model = build_mspcaps(model_config, run.init_seed, dtype=np.dtype(run.precision))
    optimizer = AdamW(model.named_parameters(), lr=run.lr, weight_decay=run.weight_decay)
    steps_per_epoch = training_steps(len(state.train_data), run.batch_size)
    schedule = Schedule(
        base_lr=run.lr,
        total_epochs=run.epochs,
        steps_per_epoch=steps_per_epoch,
        warmup_epochs=run.warmup_epochs,
        min_lr=min(run.min_lr, run.lr),
    )
    dropout_rng = np.random.default_rng(run.dropout_seed)

    out_dir = _out_dir(run)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / RESOLVED_CONFIG).write_text(json.dumps(run.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")

    update: dict[str, Any] = {
        "model": model,
        "optimizer": optimizer,
        "schedule": schedule,
        "dropout_rng": dropout_rng,
        "param_total": count_params(model).total,
    }
    if state.resume:
        checkpoint = load_checkpoint(state.resume, expected=model_config)
        checkpoint.restore(model, optimizer, dropout_rng)
        update["epoch"] = int(checkpoint.metadata["epoch"])
        update["global_step"] = int(checkpoint.metadata["global_step"])
        update["best"] = checkpoint.metadata.get("best", {})
        logger.info("resumed from %s after epoch %d", state.resume, update["epoch"])
    else:
        (out_dir / METRICS_FILE).unlink(missing_ok=True)
    return update


def train_one_epoch(state: OverallState, config: RunnableConfig) -> dict[str, Any]:
    """Run one training epoch."""
    configurable = Configuration.from_runnable_config(config)
    run = state.run
    assert state.model is not None and state.optimizer is not None and state.schedule is not None
    assert state.train_data is not None and state.dropout_rng is not None
    metrics = train_epoch(
        state.model,
        state.train_data,
        state.optimizer,
        state.schedule,
        state.dropout_rng,
        epoch=state.epoch,
        global_step=state.global_step,
        batch_size=run.batch_size,
        shuffle_seed=run.shuffle_seed,
        threads=configurable.mspcaps_threads,
    )
    return {"epoch": state.epoch + 1, "global_step": state.global_step + metrics.steps, "last_train": metrics}


def evaluate_epoch(state: OverallState, config: RunnableConfig) -> dict[str, Any]:
    """Score the test split, append both metric rows and write the checkpoints."""
    run = state.run
    assert state.model is not None and state.test_data is not None and state.last_train is not None
    train = state.last_train
    test = evaluate(state.model, state.test_data, batch_size=max(run.batch_size, 256))
    seconds = train.seconds if run.timing else 0.0
    rows = [
        MetricsRow(state.epoch, "train", train.loss, train.accuracy, train.lr, seconds),
        MetricsRow(state.epoch, "test", test.loss, test.accuracy, train.lr, 0.0),
    ]
    out_dir = _out_dir(run)
    append_metrics(out_dir / METRICS_FILE, rows)
    logger.info(
        "epoch %d/%d: train loss %.4f acc %.4f | test loss %.4f acc %.4f | lr %.3e",
        state.epoch,
        run.epochs,
        train.loss,
        train.accuracy,
        test.loss,
        test.accuracy,
        train.lr,
    )

    best = state.best
    improved = not best or test.accuracy > best["accuracy"]
    if improved:
        best = {"epoch": state.epoch, "accuracy": test.accuracy, "loss": test.loss}
    meta = {
        "epoch": state.epoch,
        "global_step": state.global_step,
        "run_config": run.model_dump(mode="json"),
        "best": best,
    }
    save_checkpoint(out_dir / LAST_CHECKPOINT, state.model, state.optimizer, state.dropout_rng, **meta)
    if improved:
        save_checkpoint(out_dir / BEST_CHECKPOINT, state.model, state.optimizer, state.dropout_rng, **meta)
    return {"history": rows, "best": best}


def route_epochs(state: OverallState, config: RunnableConfig) -> Literal["train_epoch", "finalize"]:
    """Keep training until the epoch budget is spent."""
    assert state.run.epochs is not None
    if state.epoch < state.run.epochs:
        return "train_epoch"
    return "finalize"


def finalize(state: OverallState, config: RunnableConfig) -> dict[str, Any]:
    """Summarize the run."""
    final = {}
    test_rows = [row for row in state.history if row.split == "test"]
    if test_rows:
        last = test_rows[-1]
        final = {"epoch": last.epoch, "accuracy": last.accuracy, "loss": last.loss}
    if state.best:
        logger.info("best test accuracy %.4f at epoch %d", state.best["accuracy"], state.best["epoch"])
    return {"final": final}


builder = StateGraph(OverallState, input_schema=InputState, output_schema=OutputState)
builder.add_node("load_data", load_data)
builder.add_node("build_model", build_model)
builder.add_node("train_epoch", train_one_epoch)
builder.add_node("evaluate_epoch", evaluate_epoch)
builder.add_node("finalize", finalize)

builder.add_edge(START, "load_data")
builder.add_edge("load_data", "build_model")
builder.add_conditional_edges("build_model", route_epochs)
builder.add_edge("train_epoch", "evaluate_epoch")
builder.add_conditional_edges("evaluate_epoch", route_epochs)
builder.add_edge("finalize", END)

graph = builder.compile()


def run_training(run: RunConfig, resume: Optional[str] = None, config: Optional[RunnableConfig] = None) -> dict[str, Any]:
    """Invoke the training graph for a resolved run configuration and return its output state."""
    run = run.resolve()
    assert run.epochs is not None
    invoke_config: RunnableConfig = {**(config or {}), "recursion_limit": 2 * run.epochs + 10}
    return graph.invoke({"run": run, "resume": resume}, config=invoke_config)
