# FlexRequest Toolkit - network-aware flexibility procurement
