"""
Quick Test Script - Verify your setup
Run this to check that the numerical stack and the package import correctly
"""

import os
import sys
from pathlib import Path

project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))


def check_imports():
    """Check all required imports"""
    print("🔍 Checking imports...")

    try:
        import numpy as np
        print(f"✅ NumPy {np.__version__}")
    except ImportError:
        print("❌ NumPy not installed")
        return False

    try:
        import scipy
        print(f"✅ SciPy {scipy.__version__}")
    except ImportError:
        print("❌ SciPy not installed")
        return False

    try:
        import torch
        print(f"✅ PyTorch {torch.__version__} (CUDA available: {torch.cuda.is_available()})")
    except ImportError:
        print("❌ PyTorch not installed")
        return False

    try:
        import matplotlib
        print(f"✅ Matplotlib {matplotlib.__version__}")
    except ImportError:
        print("❌ Matplotlib not installed")
        return False

    try:
        from dotenv import load_dotenv  # noqa: F401
        print("✅ python-dotenv installed")
    except ImportError:
        print("❌ python-dotenv not installed")
        return False

    return True


def check_env_file():
    """Check environment configuration"""
    print("\n🔍 Checking environment configuration...")

    if not os.path.exists(project_root / ".env"):
        print("⚠️  .env file not found; defaults apply. Copy .env.example to .env to change them.")
    else:
        print("✅ .env file exists")

    from physnet3d.config import get_settings
    settings = get_settings()
    print(f"✅ Device: {settings.device} -> {settings.torch_device()}")
    print(f"✅ Workers: {settings.workers}, data dir: {settings.data_dir}, log level: {settings.log_level}")
    if settings.run_slow:
        print("⚠️  PHYSNET_RUN_SLOW is set; desk-scale training tests will run")
    return settings.workers >= 1


def check_package():
    """Check the package with a tiny forward pass"""
    print("\n🔍 Checking physnet3d...")

    try:
        import physnet3d
        from physnet3d.physnet import NetworkConfig, PhysNet, predict
        from physnet3d.voxel import VoxelGrid

        model = PhysNet(NetworkConfig(8, conv_levels=2, base_channels=2, max_channels=4))
        out = predict(model, VoxelGrid.empty(8), [0.5, 0.5, 0.5, 0.0])
        print(f"✅ physnet3d {physnet3d.__version__}: forward pass produced a {out.resolution}³ grid")
    except Exception as e:
        print(f"❌ physnet3d error: {e}")
        return False

    return True


def test_imports():
    assert check_imports()


def test_env_file():
    assert check_env_file()


def test_package():
    assert check_package()


def main():
    print("🚀 physnet3d - Setup Verification")
    print("=" * 40)

    success = check_imports() and check_env_file() and check_package()

    print("\n" + "=" * 40)

    if success:
        print("🎉 Setup verification complete!")
        print("\n📋 Ready to run:")
        print("- Generate:   python app.py generate --out data/bridge_16")
        print("- Train:      python app.py train --dataset data/bridge_16 --out runs/bridge_16")
        print("- Experiment: python app.py experiment encoding_comparison --out runs/encoding --autogen")
    else:
        print("❌ Setup issues found. Please check the errors above.")
        print("\n🔧 Common fixes:")
        print("- Run: pip install -r requirements.txt")
        print("- Copy .env.example to .env and adjust the settings")

    print("\n📚 Need help? Check README.md for detailed instructions.")


if __name__ == "__main__":
    main()
