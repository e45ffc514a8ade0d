#!/usr/bin/env python3
"""
Test Script for the LRDM System

Smoke-tests the whole pipeline on a tiny configuration: data, training,
sampling, reconstruction, interpolation and evaluation.
"""

import tempfile
import traceback
from pathlib import Path

from lrdm import LRDMState, PipelineService, RunConfig


SMOKE_CONFIG = {
    "schedule": {"T": 10},
    "model": {"mode": "lrdm", "parameterization": "image", "hidden": [16, 16], "encoder_hidden": [16, 16],
              "embed_dim": 8, "repr_dim": 2},
    "trainer": {"steps": 20, "batch_size": 16, "ema_decay": 0.9},
    "sampler": {"n": 32, "shard_size": 16},
    "data": {"n": 128, "n_heldout": 64},
    "analysis": {"t_grid_points": 4, "n_mc": 1, "n_eval": 8, "energy_max_points": 100,
                 "null_resamples": 3, "pca_grid_n": 2, "interp_points": 3, "recon_resamples": 2},
}


def run_smoke(output_dir: Path) -> bool:
    """Run every pipeline command once; returns True when all succeed."""
    print("🧪 Testing LRDM System...")

    try:
        # Test 1: State and config
        print("\n1. Testing State and Run Config...")
        state = LRDMState(output_dir=str(output_dir))
        config = RunConfig(SMOKE_CONFIG, state).validate()
        print(f"   ✅ Output root: {state.get_output_path()}")
        print(f"   ✅ Mode: {config.get('model.mode')}, T={config.get('schedule.T')}")

        # Test 2: Pipeline
        print("\n2. Testing Pipeline Service...")
        pipeline = PipelineService(state, config)
        info = pipeline.get_pipeline_info()
        print(f"   ✅ Pipeline initialized (jobs={info['jobs']})")

        # Test 3: Commands
        print("\n3. Running Commands...")
        results = pipeline.run_train()
        _check(results)
        checkpoint = results["outputs"]["checkpoint"]
        print(f"   ✅ train: final loss {results['processing_info']['run']['final_loss']:.4f}")

        for name, result in [
            ("schedule-dump", pipeline.run_schedule_dump()),
            ("sample", pipeline.run_sample(checkpoint, trace=True)),
            ("reconstruct", pipeline.run_reconstruct(checkpoint)),
            ("interpolate", pipeline.run_interpolate(checkpoint)),
            ("pca-grid", pipeline.run_pca_grid(checkpoint)),
            ("eval", pipeline.run_eval(checkpoint)),
        ]:
            _check(result)
            print(f"   ✅ {name}: {len(result['outputs'])} output files")

        # Test 4: Output tree
        print("\n4. Checking Output Directories...")
        for path in sorted(p for p in Path(output_dir).iterdir() if p.is_dir()):
            print(f"   ✅ {path.name}: {len(list(path.iterdir()))} files")

        print("\n🎉 All tests passed! System is working correctly.")
        return True

    except Exception as e:
        print(f"\n❌ Test failed: {e}")
        traceback.print_exc()
        return False


def _check(results):
    if not results["success"]:
        raise RuntimeError(f"{results['command']} failed: {results['errors']}")


def test_system(tmp_path):
    assert run_smoke(tmp_path)


if __name__ == "__main__":
    print("🚀 LRDM System Test")
    print("=" * 50)

    with tempfile.TemporaryDirectory() as tmp:
        success = run_smoke(Path(tmp))

    print("\n" + "=" * 50)
    if success:
        print("🎉 All tests passed! The system is ready to use.")
        print("\nNext steps:")
        print("1. Install dependencies: pip install -r requirements.txt")
        print("2. Run the unit tests: pytest")
        print("3. Train a model: python lrdm_cli.py train -o runs/dm")
    else:
        print("❌ Some tests failed. Please check the errors above.")
        print("\nTroubleshooting:")
        print("1. Install dependencies: pip install -r requirements.txt")
        print("2. Check Python version (3.8+ required)")
        print("3. Verify all lrdm/ module files are present")
