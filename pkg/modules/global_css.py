# modules/global_css.py

GLOBAL_CSS = """
:root {
  --font-small:         0.75rem;
  --tab-text-size:      1.2rem;
  --upload-box-width:   420px;
  --sidebar-button-width: 170px;
  --metric-value-size:  1.6rem;
}

.font-small { font-size: var(--font-small) !important; }

/* Upload boxes */
div[data-testid="stFileUploader"],
div[data-testid="stFileUploader"] > label {
  width: var(--upload-box-width) !important;
}

/* Page tabs */
div[data-testid="stTabs"] button[role="tab"] > div {
  font-size: var(--tab-text-size) !important;
}

/* Sidebar navigation */
[data-testid="stSidebar"] button {
  width: var(--sidebar-button-width) !important;
  height: 2.5rem;
}

[data-testid="stSidebar"] .element-container,
[data-testid="stSidebar"] .stButton {
  margin-bottom: 0.25rem !important;
}

/* Dataset and evaluation metrics */
div[data-testid="stMetricValue"] {
  font-size: var(--metric-value-size) !important;
}

/* Compact notifications */
[data-testid="stAlert"] {
  margin-top: 0.25rem !important;
  margin-bottom: 0.25rem !important;
  padding: 0.5rem !important;
}
"""
