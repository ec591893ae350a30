#!/usr/bin/env python3
"""
Personalized PATE Troubleshooting Script
Run this to diagnose common issues with the accounting setup and result folders
"""

import importlib
import os
import platform
import sys

def check_python_version():
    """Check Python version"""
    version = sys.version_info
    print(f"🐍 Python Version: {version.major}.{version.minor}.{version.micro}")
    if version.major < 3 or (version.major == 3 and version.minor < 9):
        print("⚠️  WARNING: Python 3.9+ recommended")
    else:
        print("✅ Python version OK")

def check_required_modules():
    """Check if required Python modules are installed"""
    required_modules = ['numpy', 'pandas', 'scipy', 'tqdm', 'pytest']

    print("\n📦 Checking Python Modules:")
    missing_modules = []

    for module in required_modules:
        try:
            mod = importlib.import_module(module)
            print(f"✅ {module} {getattr(mod, '__version__', '')}")
        except ImportError:
            print(f"❌ {module} - MISSING")
            missing_modules.append(module)

    if missing_modules:
        print(f"\n⚠️  Missing modules: {', '.join(missing_modules)}")
        print("💡 Install with: pip install -r requirements.txt")
    else:
        print("✅ All required modules found")
    return not missing_modules

def check_file_structure():
    """Check if required files exist"""
    print("\n📁 Checking File Structure:")

    required_files = [
        'backend/generate.py',
        'backend/rdp_accountant.py',
        'backend/aggregators.py',
        'backend/planner.py',
        'backend/teacher_simulator.py',
        'backend/voting_engine.py',
        'backend/file_formats.py',
        'backend/atomic_files.py',
        'requirements.txt',
        'pytest.ini',
    ]

    for file_path in required_files:
        if os.path.exists(file_path):
            print(f"✅ {file_path}")
        else:
            print(f"❌ {file_path} - MISSING")

def check_working_directory():
    """Check if running from correct directory"""
    print(f"\n📍 Current Directory: {os.getcwd()}")

    indicators = ['backend', 'README.md', 'pytest.ini']
    found_indicators = [item for item in indicators if os.path.exists(item)]

    if len(found_indicators) >= 2:
        print("✅ Appears to be in correct project directory")
    else:
        print("⚠️  May not be in correct project directory")
        print("💡 Make sure you're in the project root (the folder holding pytest.ini)")

def check_system_info():
    """Display system information"""
    print(f"\n💻 System Info:")
    print(f"   OS: {platform.system()} {platform.release()}")
    print(f"   Architecture: {platform.machine()}")
    print(f"   CPUs: {os.cpu_count()} (use --jobs up to this for parallel ensembles)")

def run_basic_test():
    """Account a tiny hand-checkable example"""
    print("\n🧪 Running Basic Test:")

    try:
        sys.path.insert(0, 'backend')
        from rdp_accountant import RdpCurve, loose_bound, rdp_to_dp
        import generate  # noqa: F401
        print("✅ Can import generate.py and the accountant")

        cost = loose_bound(1.0, 40.0, 10.0)
        if abs(cost - 10 / 1600) < 1e-12:
            print(f"✅ Loose bound at sigma=40, alpha=10: {cost:.6f}")
        else:
            print(f"❌ Loose bound is off: {cost}")

        eps, alpha = rdp_to_dp(RdpCurve([2, 3, 4], [0.1, 0.2, 0.3]), 1e-5)
        print(f"✅ Conversion works: epsilon={eps:.4f} at alpha={alpha:g}")
        print("💡 Try running: python backend/generate.py plan --variant weighting --budget log2:0.5 --budget log4:0.5")
    except Exception as e:
        print(f"❌ Basic test failed: {e}")

def check_result_folders():
    """Check history files under results/ for the expected header"""
    print("\n📊 Checking Result Folders:")

    results_dir = "results"
    if not os.path.exists(results_dir):
        print("💡 No results/ folder yet, run: python backend/generate.py run")
        return

    bad_files = []
    for root, dirs, files in os.walk(results_dir):
        for file in sorted(files):
            if not (file.startswith('history_') and file.endswith('.csv')):
                continue
            file_path = os.path.join(root, file)
            try:
                with open(file_path, encoding='utf-8') as f:
                    first = f.readline().strip()
                if first.startswith('# pate-history-format:'):
                    print(f"✅ {file_path}")
                else:
                    bad_files.append(file_path)
                    print(f"⚠️  Unknown header in {file_path}: {first[:40]!r}")
            except Exception as e:
                print(f"❌ Could not check {file_path}: {e}")

    if bad_files:
        print(f"\n⚠️  Found {len(bad_files)} history files the report command will reject")
        print("💡 Re-run the experiment with: python backend/generate.py run --config <run_dir>/config.json")
    else:
        print("✅ All history files readable")

def main():
    """Main troubleshooting function"""
    print("🔧 Personalized PATE Troubleshooting Tool")
    print("=" * 50)

    check_python_version()
    check_system_info()
    check_working_directory()
    check_file_structure()
    if check_required_modules():
        run_basic_test()
    check_result_folders()

    print("\n" + "=" * 50)
    print("🎯 Troubleshooting Complete!")
    print("\n💡 Common Solutions:")
    print("   1. Install dependencies: pip install -r requirements.txt")
    print("   2. Make sure you're in the project root directory")
    print("   3. Upsampling needs commensurate budgets (e.g. log2 and log4); raise --duplicate-cap otherwise")
    print("   4. A vote file's header must read classes=<m>,teachers=<k> and k must match the plan")
    print("   5. Slow replication tests: pytest -m slow")

if __name__ == "__main__":
    main()
