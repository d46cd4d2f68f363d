import majnet

version = majnet.__version__

from setuptools import setup, find_packages

setup(name='majnet',
      packages=find_packages(exclude=['examples', 'examples.*']),
      version=version,
      description='Binary neural networks with majority-compressed popcounts '
                  'and FPGA cost exploration',
      include_package_data=True,
      install_requires=['numpy>=1.20',
                        'scikit-learn>=0.24',
                        'pandas>=1.1',
                        'scipy>=1.5',
                        'joblib>=0.17'],
      entry_points={'console_scripts': ['majnet=majnet.cli:main']},
      classifiers=[
          'Development Status :: 3 - Alpha',
          'Intended Audience :: Developers',
          'Intended Audience :: Science/Research',
          'License :: OSI Approved',
          'Programming Language :: Python',
          'Topic :: Scientific/Engineering :: Artificial Intelligence',
          'Topic :: Scientific/Engineering :: Electronic Design Automation (EDA)',
          'Programming Language :: Python :: 3.7',
          'Programming Language :: Python :: 3.8',
          'Programming Language :: Python :: 3.9',
          ],
      license='new BSD'
)
