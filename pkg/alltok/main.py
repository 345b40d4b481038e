import json
import logging
from pathlib import Path
from typing import Annotated, Any, Callable, Dict, List, Optional, Tuple, Type, TypeVar, get_args

import typer
import yaml
from pydantic import BaseModel, Field, ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import Progress, SpinnerColumn, TextColumn

from alltok.bench import (
    SceneSpec,
    export_previews,
    generate_scenes,
    load_scenes,
    save_scene,
    scene_path,
    tokenizer_dataset,
)
from alltok.config import SolverRunConfig, TokenizerRunConfig, default_data_root, read_yaml
from alltok.exceptions import AllTokError, ContractError, MissingTokenizerError
from alltok.manifest import RunManifest, hash_inputs
from alltok.solver import DecodeOptions, build_solver, load_solver
from alltok.suites import gradcheck_suite, roundtrip_suite
from alltok.tokenizer import (
    TokenizerModel,
    load_tokenizer,
    reconstruction_iou,
    reconstruction_rmse,
    train_tokenizer as fit_tokenizer,
)
from alltok.training import TOKENIZER_TASKS, SolverDataset, check_tokenizers, evaluate_solver, train_solver as fit_solver
from alltok.types import DecodeMode, RoundtripSuite, Task, TokenizerTask

app = typer.Typer()
CHECKMARK = "[green]✔[/green]"
CROSS_MARK = "[red]✘[/red]"
ERROR_CONSOLE = Console(stderr=True)

EXIT_OPERATIONAL = 1
EXIT_INVARIANT = 2

logger = logging.getLogger(__name__)

Options = TypeVar("Options", bound=BaseModel)
Outcome = Tuple[Dict[str, Any], bool]


class GenDataOptions(BaseModel):
    out: Path
    n: int = Field(ge=0)
    seed: int = 0
    spec: Optional[Path] = None
    previews: int = Field(default=0, ge=0)


class TrainTokenizerOptions(BaseModel):
    task: TokenizerTask
    data: Path
    out: Path
    config: Optional[Path] = None
    mask_ratio: Optional[float] = None
    patch_size: Optional[int] = None
    epochs: Optional[int] = None
    seed: Optional[int] = None
    holdout: Optional[int] = None
    observed: bool = True
    resume: Optional[Path] = None


class TrainSolverOptions(BaseModel):
    tasks: List[Task]
    data: Path
    out: Path
    depth_tokenizer: Optional[Path] = None
    mask_tokenizer: Optional[Path] = None
    config: Optional[Path] = None
    aux_weight: Optional[float] = None
    epochs: Optional[int] = None
    seed: Optional[int] = None
    holdout: Optional[int] = None
    resume: Optional[Path] = None


class EvalOptions(BaseModel):
    ckpt: Path
    task: Task
    data: Path
    mode: DecodeMode = "hard"
    detokenizer_mode: Optional[DecodeMode] = None
    parallel: bool = False
    temperature: float = 1.0
    tokenizer: Optional[Path] = None
    holdout: Optional[int] = None
    score_threshold: float = 0.0
    out: Optional[Path] = None


class RoundtripOptions(BaseModel):
    suite: RoundtripSuite
    seed: int = 0
    out: Optional[Path] = None


class GradcheckOptions(BaseModel):
    seed: int = 0
    out: Optional[Path] = None


def _relative(paths: List[Path], root: Path) -> List[str]:
    return [str(path.relative_to(root)) for path in paths]


def _fresh(path: Path, resume: Optional[Path]) -> Path:
    if resume is None and path.exists():
        path.unlink()
    return path


def run_gen_data(options: GenDataOptions) -> Outcome:
    spec = SceneSpec.model_validate(read_yaml(options.spec) | {"seed": options.seed})
    options.out.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    for index, scene in enumerate(generate_scenes(spec, options.n, options.seed)):
        path = scene_path(options.out, index)
        save_scene(scene, path)
        written.append(path)
        if index < options.previews:
            written += export_previews(scene, options.out / "previews", path.stem)
    content_hash = hash_inputs(options.out)
    RunManifest(
        command="gen-data",
        options=options.model_dump(mode="json"),
        config=spec.model_dump(mode="json"),
        seed=options.seed,
        output_hash=content_hash,
        outputs=_relative(written, options.out),
    ).save(options.out)
    return {"n_scenes": options.n, "content_hash": content_hash, "out": str(options.out)}, True


def run_train_tokenizer(options: TrainTokenizerOptions) -> Outcome:
    run_config = TokenizerRunConfig.resolve(
        options.task,
        options.config,
        {
            "tokenizer": {"seed": options.seed},
            "train": {"epochs": options.epochs, "seed": options.seed},
            "augmentation": {"mask_ratio": options.mask_ratio, "patch_size": options.patch_size},
            "n_holdout": options.holdout,
        },
    )
    scenes = load_scenes(options.data)
    if not scenes:
        raise ContractError(f"No scenes to train on in {options.data}")
    dataset = tokenizer_dataset(scenes, options.task, observed=options.observed)
    validation = None
    if run_config.n_holdout:
        dataset, validation = dataset.split(run_config.n_holdout)
    options.out.mkdir(parents=True, exist_ok=True)
    checkpoint = options.out / "tokenizer.aitk"
    metrics = _fresh(options.out / "metrics.jsonl", options.resume)
    augmentation = run_config.augmentation if run_config.augmentation.mask_ratio > 0 else None
    result = fit_tokenizer(
        dataset,
        run_config.tokenizer,
        run_config.train,
        aug=augmentation,
        validation=validation,
        checkpoint_path=checkpoint,
        metrics_path=metrics,
        resume=options.resume,
    )
    summary: Dict[str, Any] = {"checkpoint": str(checkpoint), "epochs": len(result.history)}
    if result.history:
        summary |= {"loss": result.history[-1].loss, "recon_metric": result.history[-1].recon_metric}
    if validation is not None:
        evaluate = reconstruction_iou if options.task == "mask" else reconstruction_rmse
        summary["validation"] = evaluate(result.model, validation)
    RunManifest(
        command="train-tokenizer",
        options=options.model_dump(mode="json"),
        config=run_config.model_dump(mode="json"),
        seed=run_config.train.seed,
        input_hash=hash_inputs(options.data),
        output_hash=hash_inputs(options.out),
        outputs=_relative([checkpoint, metrics], options.out),
    ).save(options.out)
    return summary, True


def _tokenizer_paths(options: TrainSolverOptions) -> Dict[Task, Path]:
    candidates: Dict[Task, Optional[Path]] = {"dep": options.depth_tokenizer, "ins": options.mask_tokenizer}
    paths: Dict[Task, Path] = {}
    for task in options.tasks:
        path = candidates[task]
        if path is None:
            raise MissingTokenizerError(f"Task {task} needs a {TOKENIZER_TASKS[task]} tokenizer checkpoint")
        paths[task] = path
    return paths


def run_train_solver(options: TrainSolverOptions) -> Outcome:
    run_config = SolverRunConfig.resolve(
        options.config,
        {
            "solver": {"seed": options.seed},
            "loss": {"aux_loss_weight": options.aux_weight},
            "train": {"epochs": options.epochs, "seed": options.seed},
            "n_holdout": options.holdout,
        },
    )
    paths = _tokenizer_paths(options)
    tokenizers: Dict[Task, TokenizerModel] = {task: load_tokenizer(path)[0] for task, path in paths.items()}
    model = build_solver(run_config.solver)
    check_tokenizers(model, tokenizers, set(options.tasks))
    scenes = load_scenes(options.data)
    cut = len(scenes) - run_config.n_holdout
    if cut <= 0:
        raise ContractError(f"{len(scenes)} scenes leave nothing to train on after holding out {run_config.n_holdout}")
    dataset = SolverDataset.build(scenes[:cut], tokenizers, run_config.solver.image_size)
    options.out.mkdir(parents=True, exist_ok=True)
    checkpoint = options.out / "solver.aitk"
    metrics = _fresh(options.out / "metrics.jsonl", options.resume)
    result = fit_solver(
        model,
        dataset,
        tokenizers,
        run_config.loss,
        run_config.train,
        set(options.tasks),
        checkpoint_path=checkpoint,
        metrics_path=metrics,
        resume=options.resume,
        extra={"tokenizers": {task: str(path) for task, path in paths.items()}},
    )
    summary: Dict[str, Any] = {"checkpoint": str(checkpoint), "epochs": len(result.history)}
    if result.history:
        summary |= {"loss": result.history[-1].loss, "token_loss": result.history[-1].token_loss}
    RunManifest(
        command="train-solver",
        options=options.model_dump(mode="json"),
        config=run_config.model_dump(mode="json"),
        seed=run_config.train.seed,
        input_hash=hash_inputs(options.data),
        output_hash=hash_inputs(options.out),
        outputs=_relative([checkpoint, metrics], options.out),
    ).save(options.out)
    return summary, True


def run_eval(options: EvalOptions) -> Outcome:
    model, manifest = load_solver(options.ckpt)
    path = options.tokenizer or manifest.get("tokenizers", {}).get(options.task)
    if path is None:
        raise MissingTokenizerError(f"No {TOKENIZER_TASKS[options.task]} tokenizer given or recorded in {options.ckpt}")
    detokenizer, _ = load_tokenizer(Path(path))
    check_tokenizers(model, {options.task: detokenizer}, {options.task})
    scenes = load_scenes(options.data)
    if options.holdout:
        scenes = scenes[-options.holdout :]
    dataset = SolverDataset.build(scenes, {}, model.config.image_size)
    decode_options = DecodeOptions(
        mode=options.mode,
        detokenizer_mode=options.detokenizer_mode,
        parallel=options.parallel,
        temperature=options.temperature,
        score_threshold=options.score_threshold,
    )
    evaluation = evaluate_solver(model, dataset, detokenizer, options.task, decode_options)
    if options.out is not None:
        options.out.mkdir(parents=True, exist_ok=True)
        evaluation.save_description(options.out / "evaluation.json")
        RunManifest(
            command="eval",
            options=options.model_dump(mode="json"),
            config=decode_options.model_dump(mode="json"),
            input_hash=hash_inputs(options.data),
            outputs=["evaluation.json"],
        ).save(options.out)
    return evaluation.description(), True


def run_roundtrip(options: RoundtripOptions) -> Outcome:
    report = roundtrip_suite(options.suite, options.seed)
    payload = report.description() | {"passed": report.passed}
    if options.out is not None:
        options.out.mkdir(parents=True, exist_ok=True)
        RunManifest(command="roundtrip", options=options.model_dump(mode="json"), seed=options.seed).save(options.out)
    return payload, report.passed


def run_gradcheck(options: GradcheckOptions) -> Outcome:
    report = gradcheck_suite(options.seed)
    payload = {
        "passed": report.passed,
        "max_relative_error": report.max_relative_error,
        "n_checks": len(report.results),
        "failures": report.failures(),
    }
    if options.out is not None:
        options.out.mkdir(parents=True, exist_ok=True)
        report.save_description(options.out / "gradcheck.json")
        RunManifest(command="gradcheck", options=options.model_dump(mode="json"), seed=options.seed).save(options.out)
    return payload, report.passed


RUNNERS: Dict[str, Tuple[Type[BaseModel], Callable[[Any], Outcome]]] = {
    "gen-data": (GenDataOptions, run_gen_data),
    "train-tokenizer": (TrainTokenizerOptions, run_train_tokenizer),
    "train-solver": (TrainSolverOptions, run_train_solver),
    "eval": (EvalOptions, run_eval),
    "roundtrip": (RoundtripOptions, run_roundtrip),
    "gradcheck": (GradcheckOptions, run_gradcheck),
}


def _execute(command: str, options: BaseModel) -> None:
    """Run a command, print its JSON result and map failures to exit codes."""
    _, runner = RUNNERS[command]
    try:
        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            transient=True,
            console=ERROR_CONSOLE,
        ) as progress:
            task = progress.add_task(description=f"Running {command}...", total=None)
            payload, passed = runner(options)
            progress.remove_task(task)
    except (AllTokError, OSError, ValueError, yaml.YAMLError) as e:
        logger.error(f"{command} failed: {e}")
        ERROR_CONSOLE.print(f"{CROSS_MARK} {command} failed: {e}")
        raise typer.Exit(code=EXIT_OPERATIONAL) from e
    typer.echo(json.dumps(payload, sort_keys=True))
    if not passed:
        ERROR_CONSOLE.print(f"{CROSS_MARK} {command} found invariant violations.")
        raise typer.Exit(code=EXIT_INVARIANT)
    ERROR_CONSOLE.print(f"{CHECKMARK} {command} done.")


def _parse_tasks(tasks: str) -> List[Task]:
    parsed = [task.strip() for task in tasks.split(",") if task.strip()]
    unknown = [task for task in parsed if task not in get_args(Task)]
    if unknown or not parsed:
        ERROR_CONSOLE.print(f"{CROSS_MARK} Tasks must be a comma-separated subset of {get_args(Task)}, got {tasks!r}")
        raise typer.Exit(code=EXIT_OPERATIONAL)
    return [task for task in get_args(Task) if task in parsed]


def _build_options(model: Type[Options], **values: Any) -> Options:  # noqa: ANN401
    try:
        return model.model_validate(values)
    except ValidationError as e:
        ERROR_CONSOLE.print(f"{CROSS_MARK} Invalid options: {e}")
        raise typer.Exit(code=EXIT_OPERATIONAL) from e


@app.callback()
def main(
    log_level: Annotated[
        str,
        typer.Option(help="Logging level of the library loggers."),
    ] = "WARNING",
) -> None:
    logging.basicConfig(
        level=log_level.upper(),
        format="%(message)s",
        handlers=[RichHandler(console=ERROR_CONSOLE, show_path=False)],
        force=True,
    )


@app.command()
def gen_data(
    out: Annotated[Optional[Path], typer.Option(help="Directory receiving the scenes.")] = None,
    n: Annotated[int, typer.Option(help="Number of scenes.")] = 100,
    seed: Annotated[int, typer.Option(help="Base seed; scene i uses a seed derived from (seed, i).")] = 0,
    spec: Annotated[Optional[Path], typer.Option(help="YAML file overriding the scene specification.")] = None,
    previews: Annotated[int, typer.Option(help="Write PGM previews of the first scenes.")] = 0,
) -> None:
    options = _build_options(
        GenDataOptions, out=out or default_data_root() / "scenes", n=n, seed=seed, spec=spec, previews=previews
    )
    _execute("gen-data", options)


@app.command()
def train_tokenizer(
    task: Annotated[str, typer.Option(help="depth or mask.")],
    out: Annotated[Path, typer.Option(help="Run directory for checkpoint, metrics and manifest.")],
    data: Annotated[Optional[Path], typer.Option(help="Scene directory.")] = None,
    config: Annotated[Optional[Path], typer.Option(help="YAML run configuration.")] = None,
    mask_ratio: Annotated[Optional[float], typer.Option(help="Fraction of patches blanked per sample.")] = None,
    patch_size: Annotated[Optional[int], typer.Option(help="Side of the blanked patches.")] = None,
    epochs: Annotated[Optional[int], typer.Option(help="Number of epochs.")] = None,
    seed: Annotated[Optional[int], typer.Option(help="Seed of initialization and shuffling.")] = None,
    holdout: Annotated[Optional[int], typer.Option(help="Samples held out for validation.")] = None,
    observed: Annotated[bool, typer.Option(help="Train on observed (holed) depth instead of ground truth.")] = True,
    resume: Annotated[Optional[Path], typer.Option(help="Checkpoint to resume from.")] = None,
) -> None:
    options = _build_options(
        TrainTokenizerOptions,
        task=task,
        data=data or default_data_root() / "scenes",
        out=out,
        config=config,
        mask_ratio=mask_ratio,
        patch_size=patch_size,
        epochs=epochs,
        seed=seed,
        holdout=holdout,
        observed=observed,
        resume=resume,
    )
    _execute("train-tokenizer", options)


@app.command()
def train_solver(
    out: Annotated[Path, typer.Option(help="Run directory for checkpoint, metrics and manifest.")],
    tasks: Annotated[str, typer.Option(help="Comma-separated tasks, e.g. dep,ins.")] = "dep",
    data: Annotated[Optional[Path], typer.Option(help="Scene directory.")] = None,
    depth_tokenizer: Annotated[Optional[Path], typer.Option(help="Frozen depth tokenizer checkpoint.")] = None,
    mask_tokenizer: Annotated[Optional[Path], typer.Option(help="Frozen mask tokenizer checkpoint.")] = None,
    config: Annotated[Optional[Path], typer.Option(help="YAML run configuration.")] = None,
    aux_weight: Annotated[Optional[float], typer.Option(help="Weight of the auxiliary loss.")] = None,
    epochs: Annotated[Optional[int], typer.Option(help="Number of epochs.")] = None,
    seed: Annotated[Optional[int], typer.Option(help="Seed of initialization and shuffling.")] = None,
    holdout: Annotated[Optional[int], typer.Option(help="Trailing scenes kept out of training.")] = None,
    resume: Annotated[Optional[Path], typer.Option(help="Checkpoint to resume from.")] = None,
) -> None:
    options = _build_options(
        TrainSolverOptions,
        tasks=_parse_tasks(tasks),
        data=data or default_data_root() / "scenes",
        out=out,
        depth_tokenizer=depth_tokenizer,
        mask_tokenizer=mask_tokenizer,
        config=config,
        aux_weight=aux_weight,
        epochs=epochs,
        seed=seed,
        holdout=holdout,
        resume=resume,
    )
    _execute("train-solver", options)


@app.command("eval")
def evaluate(
    ckpt: Annotated[Path, typer.Option(help="Solver checkpoint.")],
    task: Annotated[str, typer.Option(help="dep or ins.")] = "dep",
    mode: Annotated[str, typer.Option(help="hard or soft token feeding.")] = "hard",
    detokenizer_mode: Annotated[
        Optional[str], typer.Option(help="hard or soft detokenization; defaults to --mode.")
    ] = None,
    parallel: Annotated[bool, typer.Option(help="Decode depth with the parallel head.")] = False,
    temperature: Annotated[float, typer.Option(help="Softmax temperature of the decoder.")] = 1.0,
    data: Annotated[Optional[Path], typer.Option(help="Scene directory.")] = None,
    tokenizer: Annotated[
        Optional[Path], typer.Option(help="Detokenizer checkpoint; defaults to the recorded one.")
    ] = None,
    holdout: Annotated[Optional[int], typer.Option(help="Evaluate on the trailing scenes only.")] = None,
    score_threshold: Annotated[float, typer.Option(help="Minimum class probability of instances.")] = 0.0,
    out: Annotated[Optional[Path], typer.Option(help="Directory receiving evaluation.json and a manifest.")] = None,
) -> None:
    options = _build_options(
        EvalOptions,
        ckpt=ckpt,
        task=task,
        data=data or default_data_root() / "scenes",
        mode=mode,
        detokenizer_mode=detokenizer_mode,
        parallel=parallel,
        temperature=temperature,
        tokenizer=tokenizer,
        holdout=holdout,
        score_threshold=score_threshold,
        out=out,
    )
    _execute("eval", options)


@app.command()
def roundtrip(
    suite: Annotated[str, typer.Option(help="vq, codec or interp.")] = "codec",
    seed: Annotated[int, typer.Option(help="Seed of the random inputs.")] = 0,
    out: Annotated[Optional[Path], typer.Option(help="Directory receiving a manifest.")] = None,
) -> None:
    _execute("roundtrip", _build_options(RoundtripOptions, suite=suite, seed=seed, out=out))


@app.command()
def gradcheck(
    seed: Annotated[int, typer.Option(help="Seed of the random inputs.")] = 0,
    out: Annotated[Optional[Path], typer.Option(help="Directory receiving the full report and a manifest.")] = None,
) -> None:
    _execute("gradcheck", _build_options(GradcheckOptions, seed=seed, out=out))


@app.command()
def rerun(
    manifest: Annotated[Path, typer.Argument(help="Run manifest, or the directory holding it.")],
) -> None:
    try:
        run = RunManifest.load(manifest)
    except (AllTokError, OSError) as e:
        ERROR_CONSOLE.print(f"{CROSS_MARK} Cannot rerun: {e}")
        raise typer.Exit(code=EXIT_OPERATIONAL) from e
    if run.command not in RUNNERS:
        ERROR_CONSOLE.print(f"{CROSS_MARK} Unknown command {run.command!r} in {manifest}")
        raise typer.Exit(code=EXIT_OPERATIONAL)
    model, _ = RUNNERS[run.command]
    _execute(run.command, _build_options(model, **run.options))


if __name__ == "__main__":
    app()
